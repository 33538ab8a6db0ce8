//! CSV and JSON artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bml_fbsde::stats::RunningStats;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Full-precision float cell; empty for `None`.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

/// Writes CSV tables and JSON documents into the output directory, each
/// tagged with the config hash and master seed.
pub struct Artifacts {
    dir: PathBuf,
    sha: String,
    seed: u64,
}

impl Artifacts {
    /// Creates the directory and writes the resolved config into it.
    pub fn create(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let out = Self {
            dir,
            sha: cfg.sha256(),
            seed: cfg.seed,
        };
        let path = out.path("resolved_config.toml");
        fs::write(&path, cfg.resolved()).map_err(|e| io_error(&path, e))?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn sha(&self) -> &str {
        &self.sha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn write_csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut buf = format!("# config_sha256={} seed={}\n", self.sha, self.seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
            for r in rows {
                w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
        fs::write(&path, buf).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut doc = serde_json::to_value(value).map_err(|e| CliError::Io(e.to_string()))?;
        if let Some(obj) = doc.as_object_mut() {
            obj.insert("config_sha256".into(), self.sha.clone().into());
            obj.insert("seed".into(), self.seed.into());
        }
        let mut f = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &doc).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(f).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Mean with a ±3 standard-error band across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Band {
    pub mean: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl Band {
    pub fn new(s: &RunningStats) -> Self {
        let (mean, se) = (s.mean(), s.std_error());
        Self {
            mean,
            std_error: se,
            lower: mean - 3.0 * se,
            upper: mean + 3.0 * se,
            count: s.count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        let x = 0.1f64 + 0.2;
        let s = float(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(float(-2.5), "-2.5000000000000000e0");
        assert_eq!(opt_float(None), "");
    }

    #[test]
    fn band_is_three_standard_errors() {
        let b = Band::new(&RunningStats::from_slice(&[1.0, 2.0, 3.0]));
        assert_eq!(b.mean, 2.0);
        assert!((b.upper - b.mean - 3.0 * b.std_error).abs() < 1e-15);
        assert_eq!(b.count, 3);
    }
}

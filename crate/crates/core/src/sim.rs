//! Brownian sampling, Euler-Maruyama simulation and residual paths.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::TimeGrid;
use crate::paths::{check_entries, PathBatch, DEFAULT_ENTRY_CAP};
use crate::problem::FbsdeProblem;
use crate::rng::SeedSpec;
use crate::tape::{Tape, Var};
use crate::trial::TrialSolution;

/// Paths per simulation chunk.
pub const SIM_CHUNK: usize = 256;

/// Samples `samples` Brownian paths of dimension `d`.
pub fn sample_brownian(grid: &TimeGrid, samples: usize, d: usize, seed: SeedSpec) -> Result<PathBatch> {
    sample_brownian_range(grid, 0, samples, d, seed, DEFAULT_ENTRY_CAP)
}

/// Samples global paths `first..first + count` of `seed`; the result does not
/// depend on how a larger batch is split into ranges.
pub fn sample_brownian_range(
    grid: &TimeGrid,
    first: usize,
    count: usize,
    d: usize,
    seed: SeedSpec,
    cap: usize,
) -> Result<PathBatch> {
    if count == 0 || d == 0 {
        return Err(Error::Config(format!(
            "need at least one path and one Brownian component, got M={count} d={d}"
        )));
    }
    let h = grid.intervals();
    let entries = count
        .checked_mul(h + 1)
        .and_then(|v| v.checked_mul(d))
        .unwrap_or(usize::MAX);
    check_entries(entries, cap, "Brownian path storage")?;

    let sd = grid.dt().sqrt();
    let mut dw = vec![0.0; count * h * d];
    exec::for_each_chunk_mut(&mut dw, SIM_CHUNK * h * d, |c, block| {
        for (r, path) in block.chunks_exact_mut(h * d).enumerate() {
            let mut rng = seed.rng_for((first + c * SIM_CHUNK + r) as u64);
            for v in path {
                let xi: f64 = rng.sample(StandardNormal);
                *v = sd * xi;
            }
        }
    });
    Ok(PathBatch {
        grid: grid.clone(),
        seed,
        first_path: first,
        dw: Array3::from_shape_vec((count, h, d), dw).expect("increment shape"),
        x: None,
        y: None,
        z: None,
        r: None,
    })
}

/// Rows `rows` of node `i` of a path-major `[M, N, k]` array, as a
/// contiguous `rows.len() × k` block.
pub(crate) fn node_block(arr: &Array3<f64>, rows: std::ops::Range<usize>, i: usize) -> Vec<f64> {
    let (_, nodes, k) = arr.dim();
    let data = arr.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(rows.len() * k);
    for j in rows {
        let at = (j * nodes + i) * k;
        out.extend_from_slice(&data[at..at + k]);
    }
    out
}

/// Fails on the first non-finite entry of a `B × cols` block.
pub(crate) fn check_finite(
    values: &[f64],
    cols: usize,
    first_path: usize,
    step: usize,
    quantity: &'static str,
) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(Error::Blowup {
            step,
            path: first_path + pos / cols.max(1),
            quantity,
        }),
    }
}

/// One Euler-Maruyama step `x + b dt + σ dW`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_transition(
    tape: &mut Tape,
    p: &dyn FbsdeProblem,
    t: f64,
    dt: f64,
    x: Var,
    y: Var,
    z: Var,
    dw: Var,
) -> Var {
    let drift = p.drift(tape, t, x, y, z);
    let noise = p.diffusion_times(tape, t, x, y, z, dw);
    let moved = tape.add(x, noise);
    match drift {
        Some(b) => {
            let bdt = tape.scale(b, dt);
            tape.add(moved, bdt)
        }
        None => moved,
    }
}

fn check_dims(p: &dyn FbsdeProblem, trial: &dyn TrialSolution, batch: &PathBatch) -> Result<()> {
    let (pd, td) = (p.dims(), trial.dims());
    if pd != td {
        return Err(Error::Config(format!(
            "trial dimensions {td:?} do not match problem dimensions {pd:?}"
        )));
    }
    if batch.brownian_dim() != pd.d {
        return Err(Error::Config(format!(
            "batch has {}-dimensional Brownian motion, problem needs {}",
            batch.brownian_dim(),
            pd.d
        )));
    }
    Ok(())
}

/// Simulates `X` by Euler-Maruyama with `y`, `z` from the trial and stores
/// `X`, `y`, `z` at every node.
pub fn simulate_forward(p: &dyn FbsdeProblem, trial: &dyn TrialSolution, mut batch: PathBatch) -> Result<PathBatch> {
    check_dims(p, trial, &batch)?;
    let dims = p.dims();
    let (n, m, mz) = (dims.n, dims.m, dims.z_width());
    let grid = batch.grid.clone();
    let h = grid.intervals();
    let samples = batch.samples();
    check_entries(samples * (h + 1) * mz, DEFAULT_ENTRY_CAP, "z path storage")?;
    check_entries(samples * (h + 1) * n, DEFAULT_ENTRY_CAP, "X path storage")?;
    let first = batch.first_path;
    let dw_all = &batch.dw;

    let chunks = exec::map_chunks(samples, SIM_CHUNK, |range| -> Result<_> {
        let b = range.len();
        let mut xs = vec![0.0; b * (h + 1) * n];
        let mut ys = vec![0.0; b * (h + 1) * m];
        let mut zs = vec![0.0; b * (h + 1) * mz];
        let mut x_vals: Vec<f64> = (0..b).flat_map(|_| p.x0().iter().copied()).collect();
        let mut tape = Tape::new();
        for i in 0..=h {
            let t = grid.t(i);
            tape.clear();
            let params = trial.register(&mut tape, false);
            let x = tape.constant(b, n, &x_vals);
            let (y, z) = trial.forward(&mut tape, &params, t, x);
            check_finite(tape.value(y), m, first + range.start, i, "y")?;
            check_finite(tape.value(z), mz, first + range.start, i, "z")?;
            scatter(&mut xs, &x_vals, b, h + 1, i, n);
            scatter(&mut ys, tape.value(y), b, h + 1, i, m);
            scatter(&mut zs, tape.value(z), b, h + 1, i, mz);
            if i < h {
                let dw = tape.constant(b, dims.d, &node_block(dw_all, range.clone(), i));
                let next = record_transition(&mut tape, p, t, grid.dt(), x, y, z, dw);
                check_finite(tape.value(next), n, first + range.start, i + 1, "X")?;
                x_vals.copy_from_slice(tape.value(next));
            }
        }
        Ok((xs, ys, zs))
    });

    let mut xs = Vec::with_capacity(samples * (h + 1) * n);
    let mut ys = Vec::with_capacity(samples * (h + 1) * m);
    let mut zs = Vec::with_capacity(samples * (h + 1) * mz);
    for c in chunks {
        let (a, b, z) = c?;
        xs.extend(a);
        ys.extend(b);
        zs.extend(z);
    }
    batch.x = Some(Array3::from_shape_vec((samples, h + 1, n), xs).expect("X shape"));
    batch.y = Some(Array3::from_shape_vec((samples, h + 1, m), ys).expect("y shape"));
    batch.z = Some(Array3::from_shape_vec((samples, h + 1, mz), zs).expect("z shape"));
    batch.r = None;
    Ok(batch)
}

/// Writes a `B × k` node block into a path-major chunk buffer.
pub(crate) fn scatter(dst: &mut [f64], block: &[f64], b: usize, nodes: usize, i: usize, k: usize) {
    for r in 0..b {
        let at = (r * nodes + i) * k;
        dst[at..at + k].copy_from_slice(&block[r * k..(r + 1) * k]);
    }
}

/// Driver values `f(t_i, X_i, y_i, z_i)` for `i < H` and terminal values
/// `g(X_H)`, as path-major buffers `[B, H, m]` and `[B, m]`.
pub(crate) fn driver_and_terminal(
    p: &dyn FbsdeProblem,
    batch: &PathBatch,
    range: std::ops::Range<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = p.dims();
    let (n, m, mz) = (dims.n, dims.m, dims.z_width());
    let x = PathBatch::require(&batch.x, "X")?;
    let y = PathBatch::require(&batch.y, "y")?;
    let z = PathBatch::require(&batch.z, "z")?;
    let h = batch.grid.intervals();
    let b = range.len();
    let first = batch.first_path + range.start;
    let mut f = vec![0.0; b * h * m];
    let mut tape = Tape::new();
    for i in 0..h {
        tape.clear();
        let xv = tape.constant(b, n, &node_block(x, range.clone(), i));
        let yv = tape.constant(b, m, &node_block(y, range.clone(), i));
        let zv = tape.constant(b, mz, &node_block(z, range.clone(), i));
        let fv = p.driver(&mut tape, batch.grid.t(i), xv, yv, zv);
        check_finite(tape.value(fv), m, first, i, "f")?;
        scatter(&mut f, tape.value(fv), b, h, i, m);
    }
    tape.clear();
    let xv = tape.constant(b, n, &node_block(x, range.clone(), h));
    let gv = p.terminal(&mut tape, xv);
    check_finite(tape.value(gv), m, first, h, "g")?;
    Ok((f, tape.value(gv).to_vec()))
}

/// `g(X_T)` for every path of a simulated batch, `[M, m]`.
pub fn terminal_values(p: &dyn FbsdeProblem, batch: &PathBatch) -> Result<Vec<f64>> {
    let n = p.dims().n;
    let x = PathBatch::require(&batch.x, "X")?;
    let h = batch.grid.intervals();
    let parts = exec::map_chunks(batch.samples(), SIM_CHUNK, |range| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(range.len(), n, &node_block(x, range.clone(), h));
        let gv = p.terminal(&mut tape, xv);
        check_finite(tape.value(gv), p.dims().m, batch.first_path + range.start, h, "g")?;
        Ok(tape.value(gv).to_vec())
    });
    let mut out = Vec::with_capacity(batch.samples() * p.dims().m);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Fills `R_{t_i} = y_i - (g(X_T) + Σ_{k≥i} f_k dt - Σ_{k≥i} z_k dW_k)` by one
/// backward cumulative pass per path.
pub fn compute_residuals(p: &dyn FbsdeProblem, mut batch: PathBatch) -> Result<PathBatch> {
    let dims = p.dims();
    let (m, d) = (dims.m, dims.d);
    let h = batch.grid.intervals();
    let dt = batch.grid.dt();
    let samples = batch.samples();
    let y = PathBatch::require(&batch.y, "y")?;
    let z = PathBatch::require(&batch.z, "z")?;
    let dw = &batch.dw;
    let first = batch.first_path;

    let chunks = exec::map_chunks(samples, SIM_CHUNK, |range| -> Result<Vec<f64>> {
        let (f, g) = driver_and_terminal(p, &batch, range.clone())?;
        let mut out = vec![0.0; range.len() * (h + 1) * m];
        let mut s = vec![0.0; m];
        for (r, j) in range.clone().enumerate() {
            s.copy_from_slice(&g[r * m..(r + 1) * m]);
            let path_out = &mut out[r * (h + 1) * m..(r + 1) * (h + 1) * m];
            for l in 0..m {
                path_out[h * m + l] = y[[j, h, l]] - s[l];
            }
            for i in (0..h).rev() {
                for l in 0..m {
                    let mut zdw = 0.0;
                    for k in 0..d {
                        zdw += z[[j, i, l * d + k]] * dw[[j, i, k]];
                    }
                    s[l] += f[(r * h + i) * m + l] * dt - zdw;
                    path_out[i * m + l] = y[[j, i, l]] - s[l];
                }
            }
            check_finite(path_out, (h + 1) * m, first + j, 0, "R")?;
        }
        Ok(out)
    });
    let mut r = Vec::with_capacity(samples * (h + 1) * m);
    for c in chunks {
        r.extend(c?);
    }
    batch.r = Some(Array3::from_shape_vec((samples, h + 1, m), r).expect("R shape"));
    Ok(batch)
}

/// Samples, simulates and computes residuals for global paths `range`.
pub fn simulate_range(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    range: std::ops::Range<usize>,
    seed: SeedSpec,
) -> Result<PathBatch> {
    let batch = sample_brownian_range(grid, range.start, range.len(), p.dims().d, seed, DEFAULT_ENTRY_CAP)?;
    let batch = simulate_forward(p, trial, batch)?;
    compute_residuals(p, batch)
}

/// Applies `f` to consecutive simulated sub-batches of `samples` paths and
/// returns the results in path order. Peak memory is set by `chunk`.
pub fn for_each_batch<T, F>(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    chunk: usize,
    f: F,
) -> Result<Vec<T>>
where
    F: Fn(&PathBatch) -> Result<T>,
{
    exec::chunk_ranges(samples, chunk)
        .into_iter()
        .map(|range| simulate_range(p, trial, grid, range, seed).and_then(|b| f(&b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::problems::{Hjb, ToyBsde};
    use crate::trial::{LinearFeatures, LinearTrial};

    #[test]
    fn ranges_reproduce_full_batch() {
        let grid = make_grid(1.0, 7).unwrap();
        let seed = SeedSpec::new(5, 2);
        let full = sample_brownian(&grid, 10, 3, seed).unwrap();
        let part = sample_brownian_range(&grid, 4, 3, 3, seed, DEFAULT_ENTRY_CAP).unwrap();
        for j in 0..3 {
            assert_eq!(full.dw_path(4 + j), part.dw_path(j));
        }
        assert_eq!(part.first_path(), 4);
    }

    #[test]
    fn cap_raises_resource_error() {
        let grid = make_grid(1.0, 100).unwrap();
        let err = sample_brownian_range(&grid, 0, 1000, 3, SeedSpec::new(0, 0), 1000).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
        assert!(sample_brownian(&grid, 0, 3, SeedSpec::new(0, 0)).is_err());
    }

    #[test]
    fn toy_forward_is_brownian() {
        let grid = make_grid(1.0, 10).unwrap();
        let p = ToyBsde::new(2, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 2, 0.3, 0.1);
        let batch = sample_brownian(&grid, 5, 2, SeedSpec::new(1, 1)).unwrap();
        let batch = simulate_forward(&p, &trial, batch).unwrap();
        let (x, w) = (batch.x().unwrap(), batch.w());
        for (a, b) in x.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = batch.y().unwrap();
        let expect = 0.3 * (w[[2, 4, 0]].powi(2) + w[[2, 4, 1]].powi(2));
        assert!((y[[2, 4, 0]] - expect).abs() < 1e-14);
    }

    #[test]
    fn blowup_names_step() {
        let grid = make_grid(1.0, 4).unwrap();
        let p = Hjb::new(2);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 2, f64::NAN, 0.0);
        let batch = sample_brownian(&grid, 3, 2, SeedSpec::new(1, 1)).unwrap();
        let err = simulate_forward(&p, &trial, batch).unwrap_err();
        assert_eq!(
            err,
            Error::Blowup {
                step: 0,
                path: 0,
                quantity: "y"
            }
        );
    }
}

use thiserror::Error;

/// Errors raised by the solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in coefficient {coefficient}: expected {expected}, got {actual}")]
    Shape {
        coefficient: String,
        expected: String,
        actual: String,
    },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("simulation blew up at step {step} (path {path}): non-finite {quantity}")]
    Blowup {
        step: usize,
        path: usize,
        quantity: &'static str,
    },

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("parameters became non-finite after step {step}")]
    Diverged { step: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Blowup { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub mod checks;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod grad;
pub mod grid;
pub mod loss;
pub mod norms;
pub mod optim;
pub mod paths;
pub mod problem;
pub mod problems;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tape;
pub mod trial;

pub use error::{Error, Result};
pub use grid::{make_grid, TimeGrid};
pub use loss::{EstimatorKind, LossEstimate};
pub use paths::PathBatch;
pub use problem::{validate_problem, Dims, FbsdeProblem};
pub use rng::SeedSpec;
pub use tape::{Tape, Var};
pub use trial::{init_mlp, init_mlp_with, LinearFeatures, LinearTrial, MlpInit, MlpTrial, TrialSolution};

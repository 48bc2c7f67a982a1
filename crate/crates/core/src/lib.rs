//! Nonparametric drift estimation for ergodic diffusions with sparse,
//! norm-constrained ReLU networks.
//!
//! The pipeline simulates a long path with the Milstein scheme, subsamples it
//! every `skip` fine steps, regresses the difference quotients
//! `(X_{(k+1)δ} − X_{kδ}) / δ` on `X_{kδ}` inside the unit box, and scores the
//! fit against the true drift along an independent test path.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod sde;
pub mod seed;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use eval::{
    bound_diagnostic, irreducible_error, irreducible_error_grid, path_overlay, path_risk, risk_estimate,
    slice_profile, train_risk, DriftPredictor, MetricsRecord,
};
pub use experiment::{run_experiment, ExperimentConfig};
pub use nn::{convert_to_unit_weights, ClassCertificate, Predictor, ReluNetwork};
pub use sde::{benchmark_model, BenchmarkModel, BenchmarkParams, DiagonalSde, DiffusionShape, SdeModel};
pub use simulate::{make_regression_set, simulate_path, subsample, RegressionSet, SampledPath, Trajectory};
pub use train::{init_network, train, TrainConfig, TrainReport};

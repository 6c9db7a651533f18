//! Calibration and training under per-secret reconstruction bounds.
//!
//! Each secret `j` comes with a prior `p_j` and a target posterior `r_j`.
//! The targets become KL budgets, a packing LP weights the examples so no
//! secret is overrepresented, the weights become Poisson sampling
//! probabilities, and the DP-SGD noise multiplier is calibrated so that every
//! secret's dominating pair stays within its budget. [`attack`] plays the
//! reconstruction game against the calibrated mechanism to check the bound
//! empirically.

pub mod accountant;
pub mod attack;
pub mod divergence;
pub mod domain;
pub mod error;
pub mod lp;
pub mod pipeline;
pub mod trainer;

pub use accountant::{
    composed_kl, pld_blowup_diagnostic, poisson_binomial, round_kl, DiscretePMF, PLDDiagnostic,
    RoundMechanism,
};
pub use attack::{certified_bound, simulate_game, GameResult, ReconstructionGame};
pub use divergence::{bern_kl, budget_from_targets, invert_posterior, KLBudget};
pub use domain::{load_dataset, ExampleRecord, RunConfig, SecretMap, SecretSpec};
pub use error::{Error, Result};
pub use lp::{build_lp, solve, WeightLP, WeightVector};
pub use pipeline::{
    calibrate, calibrate_secret_sigma, sampling_probs, CalibrationReport, SamplingPlan,
    SecretCalibration, SecretSigma,
};
pub use trainer::{
    clip, make_synthetic, train, LinearRegression, LogisticRegression, ModelAdapter, TrainSettings,
    TrainTrace,
};

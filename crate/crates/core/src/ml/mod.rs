//! Unsupervised numerical kernel: isolation forest, Gaussian mixture
//! EM, silhouette scoring, and Bayesian optimization on a Gaussian
//! process surrogate.
//!
//! Everything randomized takes an explicit seed and is bit-reproducible
//! for a fixed seed. Fitted models are immutable and safe to share.

pub mod bo;
pub mod gmm;
pub mod gp;
pub mod iforest;
pub mod silhouette;

pub use bo::{bo_gp_optimize, BoConfig, BoResult, SearchSpace};
pub use gmm::{gmm_assign_all, gmm_fit_em, gmm_predict, GmmParams};
pub use gp::{gp_fit_posterior, GpPosterior, KernelParams};
pub use iforest::IsolationForest;
pub use silhouette::silhouette;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MlError {
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("row has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance stayed singular after regularization")]
    SingularCovariance,
    #[error("silhouette needs at least two distinct cluster labels")]
    SingleCluster,
    #[error("GP system remained ill-conditioned after jitter escalation")]
    IllConditioned,
}

/// Average unsuccessful-search path length in a binary search tree over
/// `n` points; the normalizer in the isolation forest score.
pub(crate) fn average_path_length(n: usize) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_9;
    if n <= 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64
}

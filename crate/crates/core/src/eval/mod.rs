//! Offline and online evaluation.
//!
//! Offline metrics score a filter against labeled samples: accuracy within
//! each subclass, their unweighted (macro) mean, and bootstrap bounds over
//! several trained models. Online metrics summarize one arm of a replay:
//! how much was filtered, shown and accepted, how good the accepted
//! completions were (an F-beta proxy computed with the crate's own
//! encoder) and the harmonic mean of timing and quality.

mod offline;
mod online;

use thiserror::Error;

use crate::models::ModelError;

pub use offline::{
    bootstrap, evaluate_offline, macro_average, subclass_accuracy, threshold, BootstrapInfo, EncoderSpec, LogisticSpec,
    OfflineReport, SplitModel, SubclassEstimate,
};
pub use online::{
    cosine_f_beta, f3_proxy, f_beta, harmonic_mean, percentile, LatencySummary, OnlineReport, OnlineTally, Scorer,
    ScorerConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {samples} samples")]
    LengthMismatch { predictions: usize, samples: usize },
    #[error("at least one prediction set is required")]
    NoModels,
    #[error("bootstrap needs at least one iteration")]
    NoIterations,
    #[error("nothing to evaluate: the test set is empty")]
    EmptyTestSet,
    #[error("{0} test samples also appear in the training pool")]
    Overlap(usize),
    #[error("invalid metric input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

//! Completion-invocation filtering.
//!
//! Decides, per keystroke context, whether an (expensive) code-completion
//! model should be invoked. The crate is organised around the life of a
//! completion request:
//!
//! - [`events`]: completion events, labeling, log I/O, balancing and a
//!   synthetic event generator.
//! - [`features`]: telemetry and textual feature extraction, scaling and
//!   one-hot assembly.
//! - [`tokenizer`]: byte-level BPE and cursor-centred context windows.
//! - [`models`]: logistic baseline, transformer encoder classifier and its two
//!   telemetry-fusing extensions, training and checkpoints.
//! - [`eval`]: offline (per-subclass, bootstrap) and online (acceptance,
//!   similarity, harmonic mean) metrics.
//! - [`gateway`]: latency-budgeted decisions, the line-delimited JSON
//!   service, sessionization and A/B log replay.

pub mod eval;
pub mod events;
pub mod features;
pub mod gateway;
pub mod models;
pub mod rng;
pub mod tokenizer;

pub use events::{CompletionEvent, Dataset, LabeledSample, Subclass};
pub use features::{FeatureLayout, FeatureMask, FeatureVector, ScalingSpec};
pub use gateway::{decide, Filter, FilterArm, FilterDecision, FilterRequest};
pub use models::{EncoderClassifier, LogisticFilter, ModelConfig, TrainConfig};
pub use tokenizer::{Strategy, TokenizedContext, Tokenizer};

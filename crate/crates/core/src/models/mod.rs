//! Filter models: the logistic baseline and a transformer encoder
//! classifier with two optional ways of fusing telemetry.
//!
//! The encoder can be extended at the classification head (telemetry
//! concatenated to the pooled first-token embedding) and/or inside
//! attention (telemetry embedded per feature and offered as extra
//! key/value slots).

mod checkpoint;
mod encoder;
mod infer;
mod logistic;
pub mod scalar;
#[cfg(target_arch = "x86_64")]
mod simd;
pub mod tape;
mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{inspect, load, save, CheckpointError, CheckpointSummary, CHECKPOINT_VERSION};
pub use encoder::{EncoderClassifier, Params, TokenizationConfig};
pub use logistic::{copilot_fixture, LogisticFilter};
pub use train::{base_config, predict_dataset, prepare, train, train_staged, AdamState, Prepared, StagedRun, TrainReport};

use crate::features::FeatureError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Telemetry enters the dense layer next to the pooled embedding.
    DenseConcat,
    /// Telemetry enters the output projection next to the dense output.
    ProjConcat,
    DenseProjConcat,
}

impl std::str::FromStr for HeadVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense_concat" => Ok(Self::DenseConcat),
            "proj_concat" => Ok(Self::ProjConcat),
            "dense_proj_concat" => Ok(Self::DenseProjConcat),
            other => Err(format!("unknown head variant `{other}`")),
        }
    }
}

impl HeadVariant {
    pub fn widens_dense(self) -> bool {
        matches!(self, Self::DenseConcat | Self::DenseProjConcat)
    }

    pub fn widens_proj(self) -> bool {
        matches!(self, Self::ProjConcat | Self::DenseProjConcat)
    }
}

/// How feature slots share attention with token slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMixing {
    /// Tokens and features get separate softmaxes whose outputs are added,
    /// so a zero feature value path leaves the layer unchanged.
    #[default]
    Additive,
    /// One softmax over token and feature keys together.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReinitFlags {
    /// Redraw the whole widened head (old columns included) instead of
    /// keeping the trained weights.
    pub head: bool,
    /// Redraw the attention extension's projections if they already exist.
    pub attn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden size `c`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Maximum positions `W`.
    pub max_positions: usize,
    pub dropout: f64,
    /// Length `F` of the telemetry input of the extensions.
    pub features: usize,
    /// Feature embedding size `d_f`.
    pub feature_dim: usize,
    pub attn_layers: BTreeSet<usize>,
    pub head_variant: Option<HeadVariant>,
    pub reinit: ReinitFlags,
    /// Share per-feature slopes/intercepts across attention layers.
    pub share_feature_embeddings: bool,
    pub feature_mixing: FeatureMixing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The laptop-sized configuration used throughout the crate.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            vocab_size: 260,
            max_positions: 512,
            dropout: 0.1,
            features: 0,
            feature_dim: 16,
            attn_layers: BTreeSet::new(),
            head_variant: None,
            reinit: ReinitFlags::default(),
            share_feature_embeddings: false,
            feature_mixing: FeatureMixing::Additive,
        }
    }

    /// A 6-layer, 768-wide encoder; only used for parameter counting.
    pub fn full() -> Self {
        ModelConfig {
            hidden: 768,
            layers: 6,
            heads: 12,
            ffn: 3072,
            vocab_size: 52_000,
            max_positions: 512,
            dropout: 0.1,
            features: 27,
            feature_dim: 204,
            attn_layers: BTreeSet::new(),
            head_variant: None,
            reinit: ReinitFlags::default(),
            share_feature_embeddings: false,
            feature_mixing: FeatureMixing::Additive,
        }
    }

    pub fn head_extended(&self) -> bool {
        self.head_variant.is_some() && self.features > 0
    }

    pub fn attn_extended(&self) -> bool {
        !self.attn_layers.is_empty() && self.features > 0
    }

    pub fn is_extended(&self) -> bool {
        self.head_extended() || self.attn_extended()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("hidden, layers, heads and ffn must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size == 0 || self.max_positions < 3 {
            return bad("vocabulary and position table must be non-trivial".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(&l) = self.attn_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("attention layer {l} outside [0, {})", self.layers));
        }
        if self.attn_extended() && self.feature_dim == 0 {
            return bad("feature_dim must be at least 1 with attention extension".into());
        }
        Ok(())
    }
}

/// Extra parameters the extensions add on top of the base encoder.
pub fn count_extension_params(config: &ModelConfig) -> usize {
    let (f, c, d) = (config.features, config.hidden, config.feature_dim);
    if f == 0 {
        return 0;
    }
    let head = match config.head_variant {
        None => 0,
        Some(HeadVariant::DenseConcat) => f * c,
        Some(HeadVariant::ProjConcat) => 2 * f,
        Some(HeadVariant::DenseProjConcat) => f * c + 2 * f,
    };
    let n_layers = config.attn_layers.len();
    let attn = if n_layers == 0 {
        0
    } else {
        let embed = 2 * f * d;
        let kv = 2 * (d * c + c);
        if config.share_feature_embeddings {
            embed + n_layers * kv
        } else {
            n_layers * (embed + kv)
        }
    };
    head + attn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Epochs (1-based) after which a snapshot of the model is kept.
    pub checkpoint_epochs: Vec<usize>,
    /// L2 penalty of the logistic model (bias excluded).
    pub l2: f64,
    /// Iteration cap of the logistic model's gradient descent.
    pub max_iterations: usize,
    /// Gradient-norm tolerance of the logistic model.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 6,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            checkpoint_epochs: Vec::new(),
            l2: 1e-4,
            max_iterations: 2000,
            tolerance: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layout(#[from] FeatureError),
    #[error("model has extensions but no feature vector was given")]
    MissingFeatures,
    #[error("feature vector has {actual} entries, model expects {expected}")]
    FeatureCount { expected: usize, actual: usize },
    #[error("context of {actual} positions exceeds the position table ({max})")]
    ContextTooLong { max: usize, actual: usize },
    #[error("token id {id} outside the vocabulary ({vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("training needs both classes, found only {0}")]
    SingleClass(&'static str),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

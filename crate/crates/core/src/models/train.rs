//! Mini-batch training of the encoder with Adam.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;

use super::encoder::EncoderClassifier;
use super::scalar::Scalar;
use super::{ModelConfig, ModelError, TrainConfig};
use crate::events::{Dataset, Subclass};
use crate::features::FeatureEncoder;
use crate::rng;
use crate::tokenizer::Tokenizer;

/// A sample ready for the encoder: content ids (no padding) and, for
/// extended models, the telemetry vector.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub ids: Vec<u32>,
    pub feats: Option<Vec<T>>,
    pub target: usize,
    pub subclass: Subclass,
}

pub fn prepare<T: Scalar>(
    model: &EncoderClassifier<T>,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
) -> Result<Vec<Prepared<T>>, ModelError> {
    let tk = model.tokenization;
    if model.config.is_extended() && model.features.is_none() {
        return Err(ModelError::MissingFeatures);
    }
    dataset
        .samples
        .iter()
        .map(|s| {
            let ctx = tokenizer.encode_context(&s.event.prefix, &s.event.suffix, tk.strategy, tk.window, tk.suffix_cap)?;
            let feats = match (&model.features, model.config.is_extended()) {
                (Some(enc), true) => Some(enc.encode(&s.event).values.iter().map(|&v| T::of(v)).collect()),
                _ => None,
            };
            Ok(Prepared {
                ids: ctx.ids[..ctx.content_len()].to_vec(),
                feats,
                target: s.label.class_index(),
                subclass: s.subclass,
            })
        })
        .collect()
}

/// First and second moment estimates, keyed by parameter name so they
/// survive adding extension parameters between training stages.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    names: Vec<String>,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &EncoderClassifier<T>) -> Self {
        AdamState {
            step: 0,
            names: model.params.names().to_vec(),
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
        }
    }

    /// Re-keys the moments onto `model`'s parameter list; new parameters
    /// start from zero moments.
    pub fn realign(self, model: &EncoderClassifier<T>) -> Self {
        let mut fresh = AdamState::new(model);
        fresh.step = self.step;
        for (name, (m, v)) in self.names.iter().zip(self.m.into_iter().zip(self.v)) {
            if let Some(i) = model.params.index_of(name) {
                if fresh.m[i].dim() == m.dim() {
                    fresh.m[i] = m;
                    fresh.v[i] = v;
                }
            }
        }
        fresh
    }

    fn update(&mut self, params: &mut [Array2<T>], grads: &[Array2<T>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() / (T::one() - b1.powi(t));
        let c2 = T::one() / (T::one() - b2.powi(t));
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.adam_eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    /// Mean loss of every epoch run in this call.
    pub loss_curve: Vec<f64>,
    pub batch_losses: Vec<f64>,
    /// `(epoch, model)` for every epoch listed in `checkpoint_epochs`.
    pub snapshots: Vec<(usize, EncoderClassifier<T>)>,
    pub optimizer: AdamState<T>,
}

/// Trains `model` in place. Pass the optimizer state of an earlier stage
/// as `resume` to continue (e.g. after adding extensions); epochs are
/// counted on from `model.meta.epochs`.
pub fn train<T: Scalar>(
    model: &mut EncoderClassifier<T>,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    resume: Option<AdamState<T>>,
) -> Result<TrainReport<T>, ModelError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let data = prepare(model, dataset, tokenizer)?;
    let mut adam = match resume {
        Some(state) => state.realign(model),
        None => AdamState::new(model),
    };
    let mut grads = model.params.zeros_like();
    let mut report = TrainReport {
        loss_curve: Vec::new(),
        batch_losses: Vec::new(),
        snapshots: Vec::new(),
        optimizer: AdamState::new(model),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        let epoch = model.meta.epochs;
        order.shuffle(&mut rng::seeded(rng::mix64(cfg.seed ^ epoch as u64), "shuffle"));
        let mut dropout_rng = rng::seeded(rng::mix64(cfg.seed ^ epoch as u64), "dropout");
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| g.fill(T::zero()));
            let weight = T::of(1.0 / batch.len() as f64);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data[i];
                let l = model.loss_and_grad(&s.ids, s.feats.as_deref(), s.target, Some(&mut dropout_rng), weight, &mut grads);
                batch_loss += l.as_f64();
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(ModelError::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            if let Some(max) = cfg.grad_clip {
                clip(&mut grads, max);
            }
            adam.update(model.params.values_mut(), &grads, cfg);
            report.batch_losses.push(batch_loss / batch.len() as f64);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("epoch {} loss {mean:.5}", epoch + 1);
        report.loss_curve.push(mean);
        model.meta.loss_curve.push(mean);
        model.meta.epochs += 1;
        model.meta.seed = cfg.seed;
        if cfg.checkpoint_epochs.contains(&model.meta.epochs) {
            report.snapshots.push((model.meta.epochs, model.clone()));
        }
    }
    report.optimizer = adam;
    Ok(report)
}

/// Result of [`train_staged`].
#[derive(Debug, Clone)]
pub struct StagedRun<T: Scalar> {
    pub model: EncoderClassifier<T>,
    /// Mean loss of every epoch, base stage first.
    pub loss_curve: Vec<f64>,
}

/// Trains `base` for `extension_epoch` epochs, adds the extensions of
/// `target` and continues with the same optimizer state until
/// `cfg.epochs` epochs have run in total. `extension_epoch = 0` trains the
/// extended model from the start; `target` without extensions trains the
/// base model throughout.
pub fn train_staged<T: Scalar>(
    mut base: EncoderClassifier<T>,
    target: &ModelConfig,
    features: FeatureEncoder,
    extension_epoch: usize,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<StagedRun<T>, ModelError> {
    cfg.validate()?;
    let wants_extension = target.head_variant.is_some() || !target.attn_layers.is_empty();
    let first = if wants_extension { extension_epoch.min(cfg.epochs) } else { cfg.epochs };
    let mut loss_curve = Vec::new();
    let mut optimizer = None;
    if first > 0 {
        let report = train(&mut base, dataset, tokenizer, &TrainConfig { epochs: first, ..cfg.clone() }, None)?;
        loss_curve.extend(report.loss_curve);
        optimizer = Some(report.optimizer);
    }
    if !wants_extension || first == cfg.epochs {
        let model = if wants_extension {
            base.with_extensions(target.clone(), features, cfg.seed)?
        } else {
            base
        };
        return Ok(StagedRun { model, loss_curve });
    }
    let mut model = base.with_extensions(target.clone(), features, cfg.seed)?;
    let rest = TrainConfig {
        epochs: cfg.epochs - first,
        ..cfg.clone()
    };
    let report = train(&mut model, dataset, tokenizer, &rest, optimizer)?;
    loss_curve.extend(report.loss_curve);
    Ok(StagedRun { model, loss_curve })
}

/// The base (extension-free) part of `config`.
pub fn base_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        features: 0,
        head_variant: None,
        attn_layers: Default::default(),
        ..config.clone()
    }
}

fn clip<T: Scalar>(grads: &mut [Array2<T>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = T::of(max / norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
}

/// Positive-class probabilities for every sample of `dataset`.
pub fn predict_dataset<T: Scalar>(
    model: &EncoderClassifier<T>,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
) -> Result<Vec<f64>, ModelError> {
    prepare(model, dataset, tokenizer)?
        .iter()
        .map(|s| {
            let [a, b] = model.logits_ids(&s.ids, s.feats.as_deref())?;
            Ok(super::encoder::positive_probability(a.as_f64(), b.as_f64()))
        })
        .collect()
}

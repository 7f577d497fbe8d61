//! Post-LN transformer encoder with a RoBERTa-style classification head.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use super::{FeatureMixing, ModelConfig, ModelError};
use crate::features::{FeatureEncoder, FeatureVector};
use crate::rng::{self, Rng};
use crate::tokenizer::{Strategy, TokenizedContext, DEFAULT_SUFFIX_CAP, DEFAULT_WINDOW};

const INIT_STD: f64 = 0.02;
const POSITION_SCALE: f64 = 0.1;

/// How raw contexts are turned into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizationConfig {
    pub strategy: Strategy,
    pub window: usize,
    pub suffix_cap: usize,
}

impl Default for TokenizationConfig {
    fn default() -> Self {
        TokenizationConfig {
            strategy: Strategy::Joint,
            window: DEFAULT_WINDOW,
            suffix_cap: DEFAULT_SUFFIX_CAP,
        }
    }
}

/// Named parameter arrays in declaration order. Vectors are `1 × n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<T>) -> usize {
        let name = name.into();
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        i
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }

    fn index(&self, name: &str) -> usize {
        self.index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderClassifier<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
    /// Telemetry encoding fed to the extensions; `Some` iff the model is
    /// extended.
    pub features: Option<FeatureEncoder>,
    pub tokenization: TokenizationConfig,
    pub meta: TrainingMeta,
}

/// Attention probabilities of one head; `features` holds the feature-slot
/// columns when the layer has the attention extension.
#[derive(Debug, Clone)]
pub struct AttentionMap<T> {
    pub layer: usize,
    pub head: usize,
    pub tokens: Array2<T>,
    pub features: Option<Array2<T>>,
}

pub(crate) struct Pass<'a> {
    pub train: Option<&'a mut Rng>,
    pub cls_only: bool,
    pub probes: Option<&'a mut Vec<(usize, usize, NodeId, Option<NodeId>)>>,
}

fn normal<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Array2<T> {
    let d = Normal::new(0.0, INIT_STD).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| T::of(d.sample(rng)))
}

fn sinusoid<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |(pos, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / cols as f64);
        let a = pos as f64 * freq;
        T::of(POSITION_SCALE * if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

fn layer_name(l: usize, rest: &str) -> String {
    format!("layer.{l}.{rest}")
}

fn slope_name(cfg: &ModelConfig, l: usize) -> String {
    if cfg.share_feature_embeddings {
        "feature.slope".into()
    } else {
        layer_name(l, "feature.slope")
    }
}

fn intercept_name(cfg: &ModelConfig, l: usize) -> String {
    if cfg.share_feature_embeddings {
        "feature.intercept".into()
    } else {
        layer_name(l, "feature.intercept")
    }
}

impl<T: Scalar> EncoderClassifier<T> {
    /// A freshly initialized model; extension parameters are created when
    /// the config asks for them, but `features` must be set before use.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::seeded(seed, "encoder-init");
        let (c, f) = (config.hidden, config.ffn);
        let mut p = Params::default();
        let ones = |n: usize| Array2::from_elem((1, n), T::one());
        let zeros = |n: usize| Array2::zeros((1, n));
        p.push("embeddings.word", normal(&mut rng, config.vocab_size, c));
        p.push("embeddings.position", sinusoid(config.max_positions, c));
        p.push("embeddings.ln.gamma", ones(c));
        p.push("embeddings.ln.beta", zeros(c));
        for l in 0..config.layers {
            for m in ["q", "k", "v", "out"] {
                p.push(layer_name(l, &format!("attn.{m}.weight")), normal(&mut rng, c, c));
                p.push(layer_name(l, &format!("attn.{m}.bias")), zeros(c));
            }
            p.push(layer_name(l, "attn.ln.gamma"), ones(c));
            p.push(layer_name(l, "attn.ln.beta"), zeros(c));
            p.push(layer_name(l, "ffn.in.weight"), normal(&mut rng, c, f));
            p.push(layer_name(l, "ffn.in.bias"), zeros(f));
            p.push(layer_name(l, "ffn.out.weight"), normal(&mut rng, f, c));
            p.push(layer_name(l, "ffn.out.bias"), zeros(c));
            p.push(layer_name(l, "ffn.ln.gamma"), ones(c));
            p.push(layer_name(l, "ffn.ln.beta"), zeros(c));
        }
        p.push("head.dense.weight", normal(&mut rng, c, c));
        p.push("head.dense.bias", zeros(c));
        p.push("head.out.weight", normal(&mut rng, c, 2));
        p.push("head.out.bias", zeros(2));
        let mut model = EncoderClassifier {
            config,
            params: p,
            features: None,
            tokenization: TokenizationConfig::default(),
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        };
        model.add_missing_extensions(&mut rng::seeded(seed, "extension-init"));
        Ok(model)
    }

    fn add_missing_extensions(&mut self, rng: &mut Rng) {
        let cfg = self.config.clone();
        let (c, f, d) = (cfg.hidden, cfg.features, cfg.feature_dim);
        if cfg.head_extended() {
            let v = cfg.head_variant.expect("head extended");
            if v.widens_dense() && self.params.index_of("head.dense.feature_weight").is_none() {
                self.params.push("head.dense.feature_weight", normal(rng, f, c));
            }
            if v.widens_proj() && self.params.index_of("head.out.feature_weight").is_none() {
                self.params.push("head.out.feature_weight", normal(rng, f, 2));
            }
        }
        if cfg.attn_extended() {
            for &l in &cfg.attn_layers {
                if self.params.index_of(&slope_name(&cfg, l)).is_none() {
                    self.params.push(slope_name(&cfg, l), normal(rng, f, d));
                    self.params.push(intercept_name(&cfg, l), Array2::zeros((f, d)));
                }
                for m in ["k", "v"] {
                    let w = layer_name(l, &format!("feature.{m}.weight"));
                    if self.params.index_of(&w).is_none() {
                        self.params.push(w, normal(rng, d, c));
                        self.params.push(layer_name(l, &format!("feature.{m}.bias")), Array2::zeros((1, c)));
                    }
                }
            }
        }
    }

    /// Copies this (typically trained) base model and adds the extensions
    /// described by `target`, which must agree on every base dimension.
    pub fn with_extensions(&self, mut target: ModelConfig, features: FeatureEncoder, seed: u64) -> Result<Self, ModelError> {
        let base = &self.config;
        if (target.hidden, target.layers, target.heads, target.ffn, target.vocab_size, target.max_positions)
            != (base.hidden, base.layers, base.heads, base.ffn, base.vocab_size, base.max_positions)
        {
            return Err(ModelError::InvalidConfig("extension target changes base dimensions".into()));
        }
        target.features = features.layout.len();
        target.validate()?;
        let mut rng = rng::seeded(seed, "extension-init");
        let mut model = self.clone();
        model.config = target.clone();
        if target.reinit.head {
            if let Some(v) = target.head_variant {
                let c = target.hidden;
                if v.widens_dense() {
                    *model.params.get_mut("head.dense.weight").expect("dense") = normal(&mut rng, c, c);
                    *model.params.get_mut("head.dense.bias").expect("dense") = Array2::zeros((1, c));
                    if let Some(w) = model.params.get_mut("head.dense.feature_weight") {
                        *w = normal(&mut rng, target.features, c);
                    }
                }
                if v.widens_proj() {
                    *model.params.get_mut("head.out.weight").expect("out") = normal(&mut rng, c, 2);
                    *model.params.get_mut("head.out.bias").expect("out") = Array2::zeros((1, 2));
                }
            }
        }
        model.add_missing_extensions(&mut rng);
        model.features = Some(features);
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderClassifier<U> {
        EncoderClassifier {
            config: self.config.clone(),
            params: self.params.cast(),
            features: self.features.clone(),
            tokenization: self.tokenization,
            meta: self.meta.clone(),
        }
    }

    /// Names of parameters that only exist because of an extension.
    pub fn extension_param_names(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| n.contains("feature"))
            .collect()
    }

    pub fn extension_param_count(&self) -> usize {
        self.extension_param_names()
            .iter()
            .map(|n| self.params.get(n).map_or(0, Array2::len))
            .sum()
    }

    /// Checks and converts a feature vector to the model's element type.
    pub fn feature_input(&self, fv: Option<&FeatureVector>) -> Result<Option<Vec<T>>, ModelError> {
        if !self.config.is_extended() {
            return Ok(None);
        }
        let fv = fv.ok_or(ModelError::MissingFeatures)?;
        if let Some(enc) = &self.features {
            enc.layout.check_matches(&fv.layout)?;
        }
        if fv.values.len() != self.config.features {
            return Err(ModelError::FeatureCount {
                expected: self.config.features,
                actual: fv.values.len(),
            });
        }
        Ok(Some(fv.values.iter().map(|&v| T::of(v)).collect()))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_positions {
            return Err(ModelError::ContextTooLong {
                max: self.config.max_positions,
                actual: ids.len(),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[negative, positive]`. Padding is trimmed and the last layer
    /// only computes the first position.
    pub fn logits(&self, ctx: &TokenizedContext, fv: Option<&FeatureVector>) -> Result<[T; 2], ModelError> {
        let feats = self.feature_input(fv)?;
        let ids = &ctx.ids[..ctx.content_len()];
        self.logits_ids(ids, feats.as_deref())
    }

    pub fn logits_ids(&self, ids: &[u32], feats: Option<&[T]>) -> Result<[T; 2], ModelError> {
        self.check_ids(ids)?;
        if self.config.is_extended() {
            let actual = feats.ok_or(ModelError::MissingFeatures)?.len();
            if actual != self.config.features {
                return Err(ModelError::FeatureCount {
                    expected: self.config.features,
                    actual,
                });
            }
        }
        Ok(super::infer::forward(self, ids, feats))
    }

    /// The same computation recorded on a [`Tape`]; kept as a reference
    /// for the serving path.
    pub fn logits_tape(&self, ids: &[u32], feats: Option<&[T]>) -> Result<[T; 2], ModelError> {
        self.check_ids(ids)?;
        let mut tape = Tape::new(self.params.values());
        let pass = Pass {
            train: None,
            cls_only: true,
            probes: None,
        };
        let out = self.build(&mut tape, ids, None, feats, pass);
        let v = tape.value(out);
        Ok([v[[0, 0]], v[[0, 1]]])
    }

    /// Reference path over the full padded window with an attention mask.
    pub fn logits_padded(&self, ctx: &TokenizedContext, fv: Option<&FeatureVector>) -> Result<[T; 2], ModelError> {
        let feats = self.feature_input(fv)?;
        self.check_ids(&ctx.ids)?;
        let mut tape = Tape::new(self.params.values());
        let pass = Pass {
            train: None,
            cls_only: false,
            probes: None,
        };
        let out = self.build(&mut tape, &ctx.ids, Some(&ctx.attention_mask), feats.as_deref(), pass);
        let v = tape.value(out);
        Ok([v[[0, 0]], v[[0, 1]]])
    }

    /// Probability of the positive class.
    pub fn predict_proba(&self, ctx: &TokenizedContext, fv: Option<&FeatureVector>) -> Result<f64, ModelError> {
        let [a, b] = self.logits(ctx, fv)?;
        Ok(positive_probability(a.as_f64(), b.as_f64()))
    }

    /// Attention probabilities of every head over the full padded window.
    pub fn attention_maps(&self, ctx: &TokenizedContext, fv: Option<&FeatureVector>) -> Result<Vec<AttentionMap<T>>, ModelError> {
        let feats = self.feature_input(fv)?;
        self.check_ids(&ctx.ids)?;
        let mut tape = Tape::new(self.params.values());
        let mut probes = Vec::new();
        let pass = Pass {
            train: None,
            cls_only: false,
            probes: Some(&mut probes),
        };
        self.build(&mut tape, &ctx.ids, Some(&ctx.attention_mask), feats.as_deref(), pass);
        Ok(probes
            .into_iter()
            .map(|(layer, head, t, f)| AttentionMap {
                layer,
                head,
                tokens: tape.value(t).to_owned(),
                features: f.map(|f| tape.value(f).to_owned()),
            })
            .collect())
    }

    /// Token representations after `layer` encoder layers (0 = embedding
    /// output). Feature slots are left out.
    pub fn hidden_states(&self, ids: &[u32], layer: usize) -> Result<Array2<T>, ModelError> {
        self.check_ids(ids)?;
        let layer = layer.min(self.config.layers);
        let mut tape = Tape::new(self.params.values());
        let mut x = self.embed(&mut tape, ids, &mut None);
        for l in 0..layer {
            x = self.layer(&mut tape, l, x, None, None, false, &mut None, &mut None);
        }
        Ok(tape.value(x).to_owned())
    }

    /// Cross-entropy of one sample; gradients scaled by `weight` are added
    /// to `grads`. Returns the (unscaled) loss.
    pub fn loss_and_grad(
        &self,
        ids: &[u32],
        feats: Option<&[T]>,
        target: usize,
        dropout_rng: Option<&mut Rng>,
        weight: T,
        grads: &mut [Array2<T>],
    ) -> T {
        let mut tape = Tape::new(self.params.values());
        let pass = Pass {
            train: dropout_rng,
            cls_only: false,
            probes: None,
        };
        let logits = self.build(&mut tape, ids, None, feats, pass);
        let loss = tape.cross_entropy(logits, target);
        tape.backward(loss, weight, grads);
        tape.value(loss)[[0, 0]]
    }

    /// Loss only (used by gradient checks).
    pub fn loss(&self, ids: &[u32], feats: Option<&[T]>, target: usize) -> T {
        let mut tape = Tape::new(self.params.values());
        let pass = Pass {
            train: None,
            cls_only: false,
            probes: None,
        };
        let logits = self.build(&mut tape, ids, None, feats, pass);
        let loss = tape.cross_entropy(logits, target);
        tape.value(loss)[[0, 0]]
    }

    fn p(&self, tape: &mut Tape<'_, T>, name: &str) -> NodeId {
        tape.param(self.params.index(name))
    }

    fn dropout(&self, tape: &mut Tape<'_, T>, x: NodeId, rng: &mut Option<&mut Rng>) -> NodeId {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate));
                let mask = tape
                    .value(x)
                    .mapv(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep });
                tape.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn embed(&self, tape: &mut Tape<'_, T>, ids: &[u32], rng: &mut Option<&mut Rng>) -> NodeId {
        let word = self.p(tape, "embeddings.word");
        let e = tape.gather(word, ids);
        let pos_table = self.p(tape, "embeddings.position");
        let pos = tape.slice_rows(pos_table, 0, ids.len());
        let x = tape.add(e, pos);
        let g = self.p(tape, "embeddings.ln.gamma");
        let b = self.p(tape, "embeddings.ln.beta");
        let x = tape.layer_norm(x, Some((g, b)));
        self.dropout(tape, x, rng)
    }

    pub(crate) fn build(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[u32],
        mask: Option<&[u8]>,
        feats: Option<&[T]>,
        pass: Pass<'_>,
    ) -> NodeId {
        let Pass {
            train: mut rng,
            cls_only,
            mut probes,
        } = pass;
        let cfg = &self.config;
        let key_mask: Option<Rc<[bool]>> = mask.map(|m| m.iter().map(|&v| v == 1).collect());
        let mut x = self.embed(tape, ids, &mut rng);
        for l in 0..cfg.layers {
            let kv = match feats {
                Some(fv) if cfg.attn_extended() && cfg.attn_layers.contains(&l) => Some(self.feature_kv(tape, l, fv)),
                _ => None,
            };
            let last = cls_only && l + 1 == cfg.layers;
            x = self.layer(tape, l, x, key_mask.clone(), kv, last, &mut rng, &mut probes);
        }
        let pooled = if tape.value(x).nrows() == 1 { x } else { tape.slice_rows(x, 0, 1) };
        self.head(tape, pooled, feats, &mut rng)
    }

    fn feature_kv(&self, tape: &mut Tape<'_, T>, l: usize, fv: &[T]) -> (NodeId, NodeId) {
        let slope = self.p(tape, &slope_name(&self.config, l));
        let intercept = self.p(tape, &intercept_name(&self.config, l));
        let e = tape.scale_rows(slope, fv.to_vec());
        let e = tape.add(e, intercept);
        let e = tape.layer_norm(e, None);
        let kw = self.p(tape, &layer_name(l, "feature.k.weight"));
        let kb = self.p(tape, &layer_name(l, "feature.k.bias"));
        let vw = self.p(tape, &layer_name(l, "feature.v.weight"));
        let vb = self.p(tape, &layer_name(l, "feature.v.bias"));
        (tape.linear(e, kw, kb), tape.linear(e, vw, vb))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape<'_, T>,
        l: usize,
        x: NodeId,
        key_mask: Option<Rc<[bool]>>,
        feature_kv: Option<(NodeId, NodeId)>,
        cls_only: bool,
        rng: &mut Option<&mut Rng>,
        probes: &mut Option<&mut Vec<(usize, usize, NodeId, Option<NodeId>)>>,
    ) -> NodeId {
        let cfg = &self.config;
        let (h, dh) = (cfg.heads, cfg.head_dim());
        let n = tape.value(x).nrows();
        let xq = if cls_only { tape.slice_rows(x, 0, 1) } else { x };
        let lin = |tape: &mut Tape<'_, T>, input: NodeId, name: &str| {
            let w = self.p(tape, &layer_name(l, &format!("{name}.weight")));
            let b = self.p(tape, &layer_name(l, &format!("{name}.bias")));
            tape.linear(input, w, b)
        };
        let q = lin(tape, xq, "attn.q");
        let k = lin(tape, x, "attn.k");
        let v = lin(tape, x, "attn.v");
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let out = match feature_kv {
                None => {
                    let p = tape.softmax(s, key_mask.clone());
                    if let Some(pr) = probes.as_deref_mut() {
                        pr.push((l, head, p, None));
                    }
                    tape.matmul(p, vh)
                }
                Some((kf, vf)) => {
                    let kfh = tape.slice_cols(kf, a, b);
                    let vfh = tape.slice_cols(vf, a, b);
                    let sf = tape.matmul_t(qh, kfh);
                    let sf = tape.scale(sf, scale);
                    let n_f = tape.value(kf).nrows();
                    match cfg.feature_mixing {
                        FeatureMixing::Additive => {
                            let p = tape.softmax(s, key_mask.clone());
                            let pf = tape.softmax(sf, None);
                            if let Some(pr) = probes.as_deref_mut() {
                                pr.push((l, head, p, Some(pf)));
                            }
                            let o = tape.matmul(p, vh);
                            let of = tape.matmul(pf, vfh);
                            tape.add(o, of)
                        }
                        FeatureMixing::Joint => {
                            let joint = tape.concat_cols(&[s, sf]);
                            let mask: Option<Rc<[bool]>> = key_mask
                                .as_ref()
                                .map(|m| m.iter().copied().chain(std::iter::repeat(true).take(n_f)).collect());
                            let p = tape.softmax(joint, mask);
                            let pt = tape.slice_cols(p, 0, n);
                            let pf = tape.slice_cols(p, n, n + n_f);
                            if let Some(pr) = probes.as_deref_mut() {
                                pr.push((l, head, pt, Some(pf)));
                            }
                            let o = tape.matmul(pt, vh);
                            let of = tape.matmul(pf, vfh);
                            tape.add(o, of)
                        }
                    }
                }
            };
            heads.push(out);
        }
        let attn = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let attn = lin(tape, attn, "attn.out");
        let attn = self.dropout(tape, attn, rng);
        let x1 = tape.add(xq, attn);
        let g = self.p(tape, &layer_name(l, "attn.ln.gamma"));
        let b = self.p(tape, &layer_name(l, "attn.ln.beta"));
        let x1 = tape.layer_norm(x1, Some((g, b)));
        let f = lin(tape, x1, "ffn.in");
        let f = tape.gelu(f);
        let f = lin(tape, f, "ffn.out");
        let f = self.dropout(tape, f, rng);
        let x2 = tape.add(x1, f);
        let g = self.p(tape, &layer_name(l, "ffn.ln.gamma"));
        let b = self.p(tape, &layer_name(l, "ffn.ln.beta"));
        tape.layer_norm(x2, Some((g, b)))
    }

    fn head(&self, tape: &mut Tape<'_, T>, pooled: NodeId, feats: Option<&[T]>, rng: &mut Option<&mut Rng>) -> NodeId {
        let variant = if self.config.head_extended() { self.config.head_variant } else { None };
        let fv = match (variant, feats) {
            (Some(_), Some(f)) => {
                let row = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row vector");
                Some(tape.leaf(row))
            }
            _ => None,
        };
        let x = self.dropout(tape, pooled, rng);
        let w = self.p(tape, "head.dense.weight");
        let b = self.p(tape, "head.dense.bias");
        let mut d = tape.linear(x, w, b);
        if let (Some(v), Some(fv)) = (variant, fv) {
            if v.widens_dense() {
                let wf = self.p(tape, "head.dense.feature_weight");
                let extra = tape.matmul(fv, wf);
                d = tape.add(d, extra);
            }
        }
        let d = tape.tanh(d);
        let d = self.dropout(tape, d, rng);
        let w = self.p(tape, "head.out.weight");
        let b = self.p(tape, "head.out.bias");
        let mut out = tape.linear(d, w, b);
        if let (Some(v), Some(fv)) = (variant, fv) {
            if v.widens_proj() {
                let wf = self.p(tape, "head.out.feature_weight");
                let extra = tape.matmul(fv, wf);
                out = tape.add(out, extra);
            }
        }
        out
    }
}

pub fn positive_probability(neg: f64, pos: f64) -> f64 {
    1.0 / (1.0 + (neg - pos).exp())
}

impl<T: Scalar> EncoderClassifier<T> {
    /// Zeroes the parameters through which the extensions reach the output:
    /// the widened head columns and the feature value projections.
    pub fn zero_extension_outputs(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.ends_with("feature_weight") || n.contains("feature.v."))
            .cloned()
            .collect();
        for n in names {
            self.params.get_mut(&n).expect("listed").fill(T::zero());
        }
    }
}

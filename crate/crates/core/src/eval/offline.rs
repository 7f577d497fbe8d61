//! Per-subclass accuracy, macro average and multi-model bootstrap.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::Serialize;

use super::EvalError;
use crate::events::{CompletionEvent, Dataset, LabeledSample, Subclass};
use crate::features::{fit_scaling, FeatureEncoder, FeatureMask};
use crate::models::{
    base_config, predict_dataset, train_staged, EncoderClassifier, LogisticFilter, ModelConfig, TokenizationConfig,
    TrainConfig,
};
use crate::rng;
use crate::tokenizer::Tokenizer;

/// Accuracy of one subclass in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubclassEstimate {
    pub accuracy: f64,
    /// Half the width of the central 50% bootstrap interval; `None` for a
    /// plain point estimate.
    pub half_width: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapInfo {
    pub iterations: usize,
    pub models: usize,
    pub seed: u64,
    pub interval: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OfflineReport {
    pub model: String,
    pub manual: Option<SubclassEstimate>,
    pub auto_accepted: Option<SubclassEstimate>,
    pub auto_rejected: Option<SubclassEstimate>,
    /// Mean of the subclass estimates that are present.
    pub macro_average: Option<f64>,
    pub bootstrap: Option<BootstrapInfo>,
}

impl OfflineReport {
    fn new(model: &str, estimates: [Option<SubclassEstimate>; 3], bootstrap: Option<BootstrapInfo>) -> Self {
        for (s, e) in Subclass::ALL.iter().zip(&estimates) {
            if e.is_none() {
                log::warn!("no {} samples: accuracy undefined and left out of the macro average", s.as_str());
            }
        }
        let [manual, auto_accepted, auto_rejected] = estimates;
        OfflineReport {
            model: model.to_string(),
            macro_average: macro_average(&estimates.map(|e| e.map(|e| e.accuracy))),
            manual,
            auto_accepted,
            auto_rejected,
            bootstrap,
        }
    }

    pub fn get(&self, s: Subclass) -> Option<&SubclassEstimate> {
        match s {
            Subclass::Manual => self.manual.as_ref(),
            Subclass::AutoAccepted => self.auto_accepted.as_ref(),
            Subclass::AutoRejected => self.auto_rejected.as_ref(),
        }
    }

    /// One row of an accuracy table; bounds are printed when present.
    pub fn table_row(&self) -> String {
        let cell = |e: Option<&SubclassEstimate>| match e {
            None => "-".to_string(),
            Some(SubclassEstimate {
                accuracy,
                half_width: Some(h),
                ..
            }) => format!("{accuracy:.1} ± {h:.1}"),
            Some(e) => format!("{:.1}", e.accuracy),
        };
        format!(
            "{:<24} {:>14} {:>14} {:>14} {:>8}",
            self.model,
            cell(self.manual.as_ref()),
            cell(self.auto_accepted.as_ref()),
            cell(self.auto_rejected.as_ref()),
            self.macro_average.map_or("-".into(), |m| format!("{m:.1}")),
        )
    }

    /// Accuracy table for several reports, with a note on the bounds.
    pub fn table(reports: &[OfflineReport]) -> String {
        let mut out = format!(
            "{:<24} {:>14} {:>14} {:>14} {:>8}\n",
            "model", "manual", "auto_accepted", "auto_rejected", "macro"
        );
        for r in reports {
            out.push_str(&r.table_row());
            out.push('\n');
        }
        if let Some(b) = reports.iter().find_map(|r| r.bootstrap.as_ref()) {
            let _ = writeln!(
                out,
                "accuracy in %; ± is half the width of the {} interval over {} bootstrap iterations ({} models, seed {})",
                b.interval, b.iterations, b.models, b.seed
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean of the values that are present; `None` if none are.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// `p ≥ t` for every probability.
pub fn threshold(probabilities: &[f64], t: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= t).collect()
}

/// Accuracy within each subclass; `predictions[i]` says whether sample `i`
/// is predicted positive.
pub fn subclass_accuracy(predictions: &[bool], samples: &[LabeledSample]) -> Result<OfflineReport, EvalError> {
    if predictions.len() != samples.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    for (&p, s) in predictions.iter().zip(samples) {
        let i = s.subclass.index();
        total[i] += 1;
        correct[i] += usize::from(p == s.label.is_positive());
    }
    let estimates = std::array::from_fn(|i| {
        (total[i] > 0).then(|| SubclassEstimate {
            accuracy: 100.0 * correct[i] as f64 / total[i] as f64,
            half_width: None,
            samples: total[i],
        })
    });
    Ok(OfflineReport::new("predictions", estimates, None))
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap over `k = prediction_sets.len()` models. Iteration `i`
/// resamples the test set with replacement and scores it with model
/// `i mod k`; each subclass reports the mean accuracy over iterations and
/// half the width of the central 50% interval. Iterations whose resample
/// misses a subclass do not count for that subclass.
pub fn bootstrap(
    prediction_sets: &[Vec<bool>],
    samples: &[LabeledSample],
    iterations: usize,
    seed: u64,
) -> Result<OfflineReport, EvalError> {
    if prediction_sets.is_empty() {
        return Err(EvalError::NoModels);
    }
    if iterations == 0 {
        return Err(EvalError::NoIterations);
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if let Some(p) = prediction_sets.iter().find(|p| p.len() != samples.len()) {
        return Err(EvalError::LengthMismatch {
            predictions: p.len(),
            samples: samples.len(),
        });
    }
    let subclass: Vec<u8> = samples.iter().map(|s| s.subclass.index() as u8).collect();
    let correct: Vec<Vec<u8>> = prediction_sets
        .iter()
        .map(|p| p.iter().zip(samples).map(|(&p, s)| u8::from(p == s.label.is_positive())).collect())
        .collect();
    let n = samples.len();
    let mut rng = rng::seeded(seed, "bootstrap");
    let mut acc: [Vec<f64>; 3] = Default::default();
    for it in 0..iterations {
        let hits = &correct[it % correct.len()];
        let mut total = [0u32; 3];
        let mut right = [0u32; 3];
        for _ in 0..n {
            let j = rng.gen_range(0..n);
            let s = subclass[j] as usize;
            total[s] += 1;
            right[s] += u32::from(hits[j]);
        }
        for s in 0..3 {
            if total[s] > 0 {
                acc[s].push(100.0 * f64::from(right[s]) / f64::from(total[s]));
            }
        }
    }
    let estimates = std::array::from_fn(|s| {
        let v = &mut acc[s];
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Some(SubclassEstimate {
            accuracy: mean,
            half_width: Some((quantile(v, 0.75) - quantile(v, 0.25)) / 2.0),
            samples: subclass.iter().filter(|&&x| x as usize == s).count(),
        })
    });
    let info = BootstrapInfo {
        iterations,
        models: prediction_sets.len(),
        seed,
        interval: "central 50%",
    };
    Ok(OfflineReport::new("bootstrap", estimates, Some(info)))
}

/// A filter family that can be trained on one split and then score a test
/// set.
pub trait SplitModel {
    fn name(&self) -> String;
    /// Positive-class probabilities for `test` after training on `train`.
    fn fit_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>, EvalError>;
}

/// Logistic regression over a feature subset.
#[derive(Debug, Clone)]
pub struct LogisticSpec {
    pub mask: FeatureMask,
    pub train: TrainConfig,
}

impl SplitModel for LogisticSpec {
    fn name(&self) -> String {
        format!("logistic ({} features)", self.mask.iter().count())
    }

    fn fit_predict(&self, train: &Dataset, test: &Dataset, _seed: u64) -> Result<Vec<f64>, EvalError> {
        let model = LogisticFilter::train(train, self.mask.clone(), &self.train)?;
        Ok(model.predict_dataset(test))
    }
}

/// Encoder classifier, optionally extended. With `extension_epoch` the
/// base model trains first and the extensions join at that epoch.
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub name: String,
    pub config: ModelConfig,
    pub tokenization: TokenizationConfig,
    pub train: TrainConfig,
    pub tokenizer: Tokenizer,
    /// Telemetry fed to the extensions.
    pub feature_mask: FeatureMask,
    pub extension_epoch: usize,
}

impl EncoderSpec {
    /// Trains on `train` and returns the model.
    pub fn fit(&self, train: &Dataset, seed: u64) -> Result<EncoderClassifier<f32>, EvalError> {
        let mut base = EncoderClassifier::<f32>::new(base_config(&self.config), seed)?;
        base.tokenization = self.tokenization;
        let features = FeatureEncoder::new(self.feature_mask.clone(), fit_scaling(train));
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let run = train_staged(base, &self.config, features, self.extension_epoch, train, &self.tokenizer, &cfg)?;
        Ok(run.model)
    }
}

impl SplitModel for EncoderSpec {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn fit_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>, EvalError> {
        let model = self.fit(train, seed)?;
        Ok(predict_dataset(&model, test, &self.tokenizer)?)
    }
}

/// Number of `test` samples whose event also occurs in `pool`.
pub fn overlap(pool: &Dataset, test: &Dataset) -> usize {
    let seen: HashSet<&CompletionEvent> = pool.samples.iter().map(|s| &s.event).collect();
    test.samples.iter().filter(|s| seen.contains(&s.event)).count()
}

/// Trains `model` on each of the `k` training parts of `pool`, predicts
/// `test` with every one of them (threshold 0.5) and bootstraps the
/// prediction sets. Refuses a test set that overlaps the pool.
pub fn evaluate_offline(
    model: &dyn SplitModel,
    pool: &Dataset,
    test: &Dataset,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<OfflineReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let shared = overlap(pool, test);
    if shared > 0 {
        return Err(EvalError::Overlap(shared));
    }
    let mut sets = Vec::new();
    for (i, (train, _)) in pool.folds(k, seed).iter().enumerate() {
        log::info!("{}: split {}/{} ({} training samples)", model.name(), i + 1, k.max(1), train.len());
        let probs = model.fit_predict(train, test, rng::derive_seed(seed, &format!("split-{i}")))?;
        sets.push(threshold(&probs, 0.5));
    }
    let mut report = bootstrap(&sets, &test.samples, iterations, seed)?;
    report.model = model.name();
    Ok(report)
}

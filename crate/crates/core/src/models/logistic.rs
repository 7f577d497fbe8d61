//! L2-regularized logistic regression over feature vectors.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ModelError, TrainConfig};
use crate::events::{CompletionEvent, Dataset};
use crate::features::{
    fit_scaling, Feature, FeatureEncoder, FeatureError, FeatureLayout, FeatureMask, FeatureVector, ScalingSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFilter {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scaling: ScalingSpec,
    pub layout: Arc<FeatureLayout>,
    pub threshold: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticFilter {
    /// All-zero weights: predicts 0.5 everywhere.
    pub fn zeros(mask: FeatureMask, scaling: ScalingSpec) -> Self {
        let layout = Arc::new(FeatureLayout::new(mask));
        LogisticFilter {
            weights: vec![0.0; layout.len()],
            bias: 0.0,
            scaling,
            layout,
            threshold: 0.5,
        }
    }

    pub fn encoder(&self) -> FeatureEncoder {
        FeatureEncoder {
            scaling: self.scaling.clone(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn margin(&self, fv: &FeatureVector) -> Result<f64, FeatureError> {
        if !Arc::ptr_eq(&self.layout, &fv.layout) {
            self.layout.check_matches(&fv.layout)?;
        }
        Ok(self.bias + self.weights.iter().zip(&fv.values).map(|(w, x)| w * x).sum::<f64>())
    }

    /// `sigmoid(w · x + b)`
    pub fn predict(&self, fv: &FeatureVector) -> Result<f64, FeatureError> {
        self.margin(fv).map(sigmoid)
    }

    pub fn predict_event(&self, event: &CompletionEvent) -> f64 {
        let fv = self.encoder().encode(event);
        self.predict(&fv).expect("encoder shares the model layout")
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Vec<f64> {
        let enc = self.encoder();
        dataset
            .samples
            .iter()
            .map(|s| self.predict(&enc.encode(&s.event)).expect("shared layout"))
            .collect()
    }

    pub fn decide(&self, probability: f64) -> bool {
        probability >= self.threshold
    }

    /// Full-batch gradient descent with backtracking line search on the
    /// mean cross-entropy plus `l2 / 2 · |w|²` (bias unpenalized).
    pub fn train(dataset: &Dataset, mask: FeatureMask, cfg: &TrainConfig) -> Result<Self, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let positives = dataset.samples.iter().filter(|s| s.label.is_positive()).count();
        if positives == 0 {
            return Err(ModelError::SingleClass("negative"));
        }
        if positives == dataset.len() {
            return Err(ModelError::SingleClass("positive"));
        }
        let mut model = LogisticFilter::zeros(mask, fit_scaling(dataset));
        let enc = model.encoder();
        let rows: Vec<Vec<(usize, f64)>> = dataset
            .samples
            .iter()
            .map(|s| {
                enc.encode(&s.event)
                    .values
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &v)| (i, v))
                    .collect()
            })
            .collect();
        let y: Vec<f64> = dataset
            .samples
            .iter()
            .map(|s| if s.label.is_positive() { 1.0 } else { 0.0 })
            .collect();
        let problem = Problem {
            rows: &rows,
            y: &y,
            dim: model.layout.len(),
            l2: cfg.l2,
        };
        let (w, b, iterations, gnorm) = problem.solve(cfg.max_iterations, cfg.tolerance);
        log::info!("logistic regression: {iterations} iterations, gradient norm {gnorm:.2e}");
        model.weights = w;
        model.bias = b;
        Ok(model)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load_json(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: LogisticFilter = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        if model.weights.len() != model.layout.len() {
            return Err(std::io::Error::other(format!(
                "{} weights for a layout of {}",
                model.weights.len(),
                model.layout.len()
            )));
        }
        Ok(model)
    }
}

struct Problem<'a> {
    rows: &'a [Vec<(usize, f64)>],
    y: &'a [f64],
    dim: usize,
    l2: f64,
}

impl Problem<'_> {
    fn objective(&self, w: &[f64], b: f64) -> f64 {
        let n = self.rows.len() as f64;
        let data: f64 = self
            .rows
            .iter()
            .zip(self.y)
            .map(|(row, &y)| {
                let z = b + row.iter().map(|&(i, v)| w[i] * v).sum::<f64>();
                softplus(z) - y * z
            })
            .sum();
        data / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.rows.len() as f64;
        let mut gw = vec![0.0; self.dim];
        let mut gb = 0.0;
        for (row, &y) in self.rows.iter().zip(self.y) {
            let z = b + row.iter().map(|&(i, v)| w[i] * v).sum::<f64>();
            let r = sigmoid(z) - y;
            gb += r;
            for &(i, v) in row {
                gw[i] += r * v;
            }
        }
        for (g, wi) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wi;
        }
        (gw, gb / n)
    }

    fn solve(&self, max_iterations: usize, tolerance: f64) -> (Vec<f64>, f64, usize, f64) {
        let mut w = vec![0.0; self.dim];
        let mut b = 0.0;
        let mut f = self.objective(&w, b);
        let mut step = 1.0;
        let mut gnorm = f64::INFINITY;
        for it in 0..max_iterations {
            let (gw, gb) = self.gradient(&w, b);
            let g2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
            gnorm = g2.sqrt();
            if gnorm < tolerance {
                return (w, b, it, gnorm);
            }
            // Armijo backtracking, starting from twice the last accepted step
            step *= 2.0;
            loop {
                let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
                let b_new = b - step * gb;
                let f_new = self.objective(&w_new, b_new);
                if f_new <= f - 0.5 * step * g2 || step < 1e-12 {
                    w = w_new;
                    b = b_new;
                    f = f_new;
                    break;
                }
                step *= 0.5;
            }
        }
        (w, b, max_iterations, gnorm)
    }
}

/// The published weights of a deployed completion filter's scalar
/// features; map (one-hot) weights are zero and inputs are log-scaled
/// without standardization.
pub fn copilot_fixture(bias: f64) -> LogisticFilter {
    let mask = FeatureMask::new([
        Feature::T1,
        Feature::T2,
        Feature::T3,
        Feature::T4,
        Feature::T5,
        Feature::C1,
        Feature::C2,
        Feature::C3,
        Feature::C4,
        Feature::C5,
    ]);
    let mut m = LogisticFilter::zeros(mask, ScalingSpec::default());
    m.bias = bias;
    for (name, w) in [
        ("c3_whitespace_after_cursor", 0.700),
        ("t1_time_since_last", -0.174),
        ("c1_last_line_len", -0.230),
        ("c2_last_line_len_nows", 0.134),
        ("t2_document_length", -0.007),
        ("t3_cursor_offset", 0.005),
        ("t4_offset_percent", 0.419),
    ] {
        let i = m.layout.position(name).expect("fixture feature in layout");
        m.weights[i] = w;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Ide, InvocationKind, Provenance, Verdict};
    use crate::features::{assemble, telemetry_from_parts, TextualFeatures, CHAR_NONE};
    use proptest::prelude::*;

    fn fixture_input(model: &LogisticFilter, c3: bool) -> FeatureVector {
        let t = telemetry_from_parts(0, 0, 0, "python", Ide::Vscode);
        let c = TextualFeatures {
            c1_last_line_len: 0,
            c2_last_line_len_nows: 0,
            c3_whitespace_after_cursor: c3,
            c4_last_char: CHAR_NONE,
            c5_last_nonws_char: CHAR_NONE,
        };
        let mut fv = assemble(&t, Some(&c), &model.scaling, &model.layout.mask).unwrap();
        fv.layout = Arc::clone(&model.layout);
        fv
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = LogisticFilter::zeros(FeatureMask::baseline(), ScalingSpec::default());
        let t = telemetry_from_parts(123, 400, 17, "go", Ide::Jetbrains);
        let c = crate::features::extract_textual("x.", "");
        let fv = assemble(&t, Some(&c), &m.scaling, &m.layout.mask).unwrap();
        assert_eq!(m.predict(&fv).unwrap(), 0.5);
    }

    #[test]
    fn fixture_whitespace_weight() {
        for bias in [0.0, -0.3, 1.2] {
            let m = copilot_fixture(bias);
            let p = m.predict(&fixture_input(&m, true)).unwrap();
            let want = 1.0 / (1.0 + (-(0.700 + bias)).exp());
            assert!((p - want).abs() < 1e-15);
            let p0 = m.predict(&fixture_input(&m, false)).unwrap();
            assert!((p0 - 1.0 / (1.0 + (-bias).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let m = LogisticFilter::zeros(FeatureMask::telemetry_only(), ScalingSpec::default());
        let t = telemetry_from_parts(1, 2, 1, "go", Ide::Vscode);
        let fv = assemble(&t, None, &ScalingSpec::default(), &FeatureMask::extension()).unwrap();
        assert!(m.predict(&fv).is_err());
    }

    #[test]
    fn matches_scalar_loop_reference() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(3, "logistic-ref");
        let mut m = LogisticFilter::zeros(FeatureMask::baseline(), ScalingSpec::default());
        m.weights.iter_mut().for_each(|w| *w = rng.gen_range(-2.0..2.0));
        m.bias = 0.37;
        for _ in 0..100 {
            let values: Vec<f64> = (0..m.layout.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fv = FeatureVector {
                values: values.clone(),
                layout: Arc::clone(&m.layout),
            };
            let mut z = m.bias;
            for i in 0..values.len() {
                z += m.weights[i] * values[i];
            }
            let reference = 1.0 / (1.0 + (-z).exp());
            assert!((m.predict(&fv).unwrap() - reference).abs() < 1e-12);
        }
    }

    fn event(t1: u64, positive: bool) -> CompletionEvent {
        CompletionEvent {
            prefix: "ab".into(),
            suffix: String::new(),
            timestamp: 0,
            time_since_last_completion: t1,
            document_length: 100,
            cursor_offset: 2,
            language: "python".into(),
            ide: Ide::Vscode,
            invocation_kind: InvocationKind::Automatic,
            verdict: if positive { Verdict::Accepted } else { Verdict::Rejected },
            ground_truth: None,
            completion: None,
            user_id: "u".into(),
            session_hint: None,
        }
    }

    #[test]
    fn separable_set_is_learned() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(9, "separable");
        let events: Vec<CompletionEvent> = (0..200)
            .map(|_| {
                let t1: u64 = rng.gen_range(1..100_000);
                event(t1, t1 > 3000)
            })
            .collect();
        let ds = Dataset::from_events(events.clone(), Provenance::Synthetic);

        // oracle: an exhaustive threshold search finds a perfect split
        let mut ts: Vec<u64> = events.iter().map(|e| e.time_since_last_completion).collect();
        ts.sort_unstable();
        let separable = ts.iter().any(|&thr| {
            events
                .iter()
                .all(|e| (e.time_since_last_completion > thr) == (e.verdict == Verdict::Accepted))
        });
        assert!(separable);

        let cfg = TrainConfig {
            l2: 1e-6,
            max_iterations: 5000,
            ..TrainConfig::default()
        };
        let m = LogisticFilter::train(&ds, FeatureMask::new([Feature::T1]), &cfg).unwrap();
        let preds = m.predict_dataset(&ds);
        let correct = preds
            .iter()
            .zip(&ds.samples)
            .filter(|(p, s)| m.decide(**p) == s.label.is_positive())
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "{correct}");
    }

    #[test]
    fn single_class_is_rejected() {
        let ds = Dataset::from_events((0..5).map(|i| event(i, true)), Provenance::Synthetic);
        assert!(matches!(
            LogisticFilter::train(&ds, FeatureMask::telemetry_only(), &TrainConfig::default()),
            Err(ModelError::SingleClass(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let m = copilot_fixture(0.1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lr.json");
        m.save_json(&p).unwrap();
        assert_eq!(LogisticFilter::load_json(&p).unwrap(), m);
    }

    proptest! {
        /// Any strictly increasing map of the score that keeps the threshold
        /// in place leaves every decision unchanged.
        #[test]
        fn decision_invariant_under_monotone_rescaling(z in -30.0f64..30.0, k in 0.1f64..10.0) {
            let m = LogisticFilter::zeros(FeatureMask::telemetry_only(), ScalingSpec::default());
            let p = sigmoid(z);
            let rescaled = sigmoid(k * (p / (1.0 - p)).ln());
            prop_assert_eq!(m.decide(p), m.decide(rescaled) || (p - 0.5).abs() < 1e-12);
        }
    }
}

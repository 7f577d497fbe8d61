//! Replay statistics: acceptance, proxy quality score, harmonic mean and
//! decision latency.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use super::EvalError;
use crate::models::EncoderClassifier;
use crate::tokenizer::Tokenizer;

/// `2ab / (a + b)`, with both-zero mapped to 0.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64, EvalError> {
    if !(a >= 0.0 && b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(EvalError::InvalidInput(format!("harmonic mean of {a} and {b}")));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// `(1 + β²)·P·R / (β²·P + R)`; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

fn unit_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Greedy embedding match: precision averages, over candidate rows, the
/// best cosine to any reference row; recall the other way round. Cosines
/// are clipped to [0, 1] and zero rows match nothing.
pub fn cosine_f_beta(candidate: ArrayView2<f64>, reference: ArrayView2<f64>, beta: f64) -> f64 {
    if candidate.nrows() == 0 || reference.nrows() == 0 {
        return 0.0;
    }
    let sim = unit_rows(candidate).dot(&unit_rows(reference).t()).mapv(|c| c.clamp(0.0, 1.0));
    let best = |axis: Axis| sim.map_axis(axis, |v| v.iter().copied().fold(0.0, f64::max)).mean().unwrap_or(0.0);
    let precision = best(Axis(1));
    let recall = best(Axis(0));
    f_beta(precision, recall, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScorerConfig {
    /// Encoder layer whose token states are compared (0 = embeddings).
    pub layer: usize,
    pub beta: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { layer: 2, beta: 3.0 }
    }
}

/// Embedding-similarity scorer built on one of the crate's own encoders.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub encoder: Arc<EncoderClassifier<f32>>,
    pub tokenizer: Arc<Tokenizer>,
    pub config: ScorerConfig,
}

impl Scorer {
    pub fn new(
        encoder: Arc<EncoderClassifier<f32>>,
        tokenizer: Arc<Tokenizer>,
        config: ScorerConfig,
    ) -> Result<Self, EvalError> {
        if !(config.beta > 0.0) {
            return Err(EvalError::InvalidInput(format!("beta must be positive, got {}", config.beta)));
        }
        Ok(Scorer {
            encoder,
            tokenizer,
            config,
        })
    }

    /// Label printed next to every score so proxy values are not mistaken
    /// for scores from an external pretrained model.
    pub fn name(&self) -> String {
        let c = &self.encoder.config;
        format!(
            "F{} embedding proxy (own encoder, L={} c={}, layer {})",
            self.config.beta,
            c.layers,
            c.hidden,
            self.config.layer.min(c.layers)
        )
    }

    /// Per-token states of `text`, specials excluded.
    fn embed(&self, text: &str) -> Result<Array2<f64>, EvalError> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.encoder.config.max_positions - 2);
        let n = ids.len();
        let mut seq = Vec::with_capacity(n + 2);
        seq.push(self.tokenizer.cls);
        seq.extend(ids);
        seq.push(self.tokenizer.sep);
        let h = self.encoder.hidden_states(&seq, self.config.layer)?;
        Ok(h.slice(ndarray::s![1..=n, ..]).mapv(f64::from))
    }
}

/// F-beta embedding similarity of `candidate` against `reference`.
pub fn f3_proxy(candidate: &str, reference: &str, scorer: &Scorer) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::InvalidInput("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let c = scorer.embed(candidate)?;
    let r = scorer.embed(reference)?;
    Ok(cosine_f_beta(c.view(), r.view(), scorer.config.beta))
}

/// Linear-interpolation percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Raw counts gathered by one replay arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OnlineTally {
    pub received: usize,
    pub filtered: usize,
    pub shown: usize,
    pub accepted: usize,
    /// Proxy scores of accepted completions that had a reference.
    pub scores: Vec<f64>,
    /// Accepted completions left unscored for lack of a reference.
    pub unscored_accepted: usize,
    pub latencies_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        Some(LatencySummary {
            count: ms.len(),
            p50_ms: percentile(ms, 50.0)?,
            p95_ms: percentile(ms, 95.0)?,
            p99_ms: percentile(ms, 99.0)?,
            max_ms: percentile(ms, 100.0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineReport {
    pub arm: String,
    pub received: usize,
    pub filtered: usize,
    pub shown: usize,
    pub accepted: usize,
    pub filtered_fraction: f64,
    pub shown_fraction: f64,
    /// Accepted completions per received request.
    pub accepted_fraction: f64,
    /// Accepted fraction relative to the no-filter arm; absent without
    /// that arm.
    pub relative_rate: Option<f64>,
    pub mean_score: Option<f64>,
    pub scored: usize,
    pub unscored_accepted: usize,
    pub harmonic_mean: f64,
    /// The harmonic mean could not be formed (no score or no relative
    /// rate) and was set to 0.
    pub degenerate: bool,
    pub latency: Option<LatencySummary>,
    pub scorer: String,
}

fn fraction(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

impl OnlineReport {
    /// `baseline_accepted_fraction` is the accepted fraction of the
    /// no-filter arm, if one ran; `is_baseline` marks that arm itself.
    pub fn from_tally(
        arm: &str,
        tally: &OnlineTally,
        baseline_accepted_fraction: Option<f64>,
        is_baseline: bool,
        scorer: &str,
    ) -> Self {
        let accepted_fraction = fraction(tally.accepted, tally.received);
        let relative_rate = if is_baseline {
            Some(1.0)
        } else {
            baseline_accepted_fraction.filter(|&b| b > 0.0).map(|b| accepted_fraction / b)
        };
        let mean_score =
            (!tally.scores.is_empty()).then(|| tally.scores.iter().sum::<f64>() / tally.scores.len() as f64);
        let (harmonic_mean, degenerate) = match (relative_rate, mean_score) {
            (Some(r), Some(s)) => harmonic_mean(r, s).map_or((0.0, true), |h| (h, false)),
            _ => (0.0, true),
        };
        OnlineReport {
            arm: arm.to_string(),
            received: tally.received,
            filtered: tally.filtered,
            shown: tally.shown,
            accepted: tally.accepted,
            filtered_fraction: fraction(tally.filtered, tally.received),
            shown_fraction: fraction(tally.shown, tally.received),
            accepted_fraction,
            relative_rate,
            mean_score,
            scored: tally.scores.len(),
            unscored_accepted: tally.unscored_accepted,
            harmonic_mean,
            degenerate,
            latency: LatencySummary::from_samples(&tally.latencies_ms),
            scorer: scorer.to_string(),
        }
    }

    /// Completion-statistics table, one row per arm.
    pub fn table(reports: &[OnlineReport]) -> String {
        let mut out = format!(
            "{:<10} {:>9} {:>9} {:>7} {:>9} {:>9} {:>7} {:>9} {:>8} {:>8} {:>8}\n",
            "arm", "received", "filtered", "shown", "accepted", "relative", "score", "harmonic", "p50 ms", "p95 ms", "p99 ms"
        );
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        for r in reports {
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>8.1}% {:>6.1}% {:>8.1}% {:>9} {:>7} {:>9} {:>8} {:>8} {:>8}",
                r.arm,
                r.received,
                100.0 * r.filtered_fraction,
                100.0 * r.shown_fraction,
                100.0 * r.accepted_fraction,
                opt(r.relative_rate, 3),
                opt(r.mean_score, 2),
                if r.degenerate { "0 (n/a)".to_string() } else { format!("{:.3}", r.harmonic_mean) },
                opt(r.latency.map(|l| l.p50_ms), 3),
                opt(r.latency.map(|l| l.p95_ms), 3),
                opt(r.latency.map(|l| l.p99_ms), 3),
            );
        }
        if let Some(r) = reports.first() {
            let _ = writeln!(out, "score: {}", r.scorer);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn completion_statistics_values() {
        for (r, s, h) in [
            (1.000, 0.76, 0.864),
            (0.450, 0.94, 0.609),
            (0.845, 0.85, 0.847),
            (1.010, 0.82, 0.905),
            (0.723, 0.88, 0.794),
        ] {
            assert!((harmonic_mean(r, s).unwrap() - h).abs() < 1e-3, "({r}, {s})");
        }
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.3, 0.3).unwrap(), 0.3);
        assert!(harmonic_mean(-1.0, 0.5).is_err());
        assert!(harmonic_mean(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn f_beta_arithmetic() {
        assert!((f_beta(1.0, 0.5, 3.0) - 5.0 / 9.5).abs() < 1e-12);
        assert_eq!(f_beta(0.0, 0.0, 3.0), 0.0);
        assert_eq!(f_beta(0.7, 0.7, 3.0), 0.7);
    }

    #[test]
    fn cosine_matching() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let b = array![[0.0, 0.0, 1.0]];
        assert_eq!(cosine_f_beta(a.view(), b.view(), 3.0), 0.0);
        assert!((cosine_f_beta(a.view(), a.view(), 3.0) - 1.0).abs() < 1e-12);
        // negative cosines clip to 0
        let c = array![[-1.0, 0.0, 0.0]];
        assert_eq!(cosine_f_beta(c.view(), a.slice(ndarray::s![0..1, ..]), 3.0), 0.0);
        // candidate covers half the reference: P = 1, R = 0.5
        let half = a.slice(ndarray::s![0..1, ..]);
        assert!((cosine_f_beta(half, a.view(), 3.0) - 5.0 / 9.5).abs() < 1e-12);
    }

    fn tiny_scorer() -> Scorer {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            max_positions: 64,
            ..ModelConfig::desk()
        };
        let enc = EncoderClassifier::<f32>::new(cfg, 5).unwrap();
        Scorer::new(Arc::new(enc), Arc::new(Tokenizer::byte_level()), ScorerConfig::default()).unwrap()
    }

    #[test]
    fn proxy_self_similarity() {
        let s = tiny_scorer();
        let v = f3_proxy("return x + 1;", "return x + 1;", &s).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
        assert_eq!(f3_proxy("", "x", &s).unwrap(), 0.0);
        assert!(f3_proxy("x", "", &s).is_err());
        let long = "y".repeat(500);
        let v = f3_proxy(&long, "y", &s).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(s.name().contains("own encoder"));
    }

    #[test]
    fn bad_beta_rejected() {
        let s = tiny_scorer();
        assert!(Scorer::new(s.encoder, s.tokenizer, ScorerConfig { layer: 1, beta: 0.0 }).is_err());
    }

    #[test]
    fn report_accounting() {
        let none = OnlineTally {
            received: 10,
            filtered: 0,
            shown: 10,
            accepted: 4,
            scores: vec![0.5, 1.0],
            unscored_accepted: 2,
            latencies_ms: vec![0.1, 0.2, 0.3],
        };
        let base = OnlineReport::from_tally("none", &none, None, true, "proxy");
        assert_eq!(base.relative_rate, Some(1.0));
        assert!((base.harmonic_mean - harmonic_mean(1.0, 0.75).unwrap()).abs() < 1e-12);
        assert_eq!(base.latency.unwrap().p50_ms, 0.2);

        let all_off = OnlineTally {
            received: 10,
            filtered: 10,
            ..Default::default()
        };
        let r = OnlineReport::from_tally("strict", &all_off, Some(base.accepted_fraction), false, "proxy");
        assert_eq!((r.shown_fraction, r.filtered_fraction), (0.0, 1.0));
        assert_eq!(r.relative_rate, Some(0.0));
        assert!(r.degenerate && r.harmonic_mean == 0.0 && r.mean_score.is_none());
        assert!(r.latency.is_none());

        let orphan = OnlineReport::from_tally("logistic", &none, None, false, "proxy");
        assert_eq!(orphan.relative_rate, None);
        assert!(OnlineReport::table(&[base, r, orphan]).contains("strict"));
    }

    #[test]
    fn percentiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert_eq!(percentile(&v, 50.0), Some(2.5));
        assert_eq!(percentile(&[], 50.0), None);
    }

    proptest! {
        #[test]
        fn harmonic_below_geometric_below_arithmetic(a in 1e-6f64..10.0, b in 1e-6f64..1.0) {
            let h = harmonic_mean(a, b).unwrap();
            let g = (a * b).sqrt();
            prop_assert!(h <= g * (1.0 + 1e-12));
            prop_assert!(g <= (a + b) / 2.0 * (1.0 + 1e-12));
            prop_assert!(h <= 2.0 * a.min(b) * (1.0 + 1e-12));
        }

        #[test]
        fn recall_dominates_at_beta_three(p in 0.05f64..1.0, r in 0.05f64..0.9, dr in 0.01f64..0.1) {
            prop_assert!(f_beta(p, r + dr, 3.0) > f_beta(p, r, 3.0));
            // swapping favours the larger recall; beta = 1 is symmetric
            let (hi, lo) = (p.max(r), p.min(r));
            if hi - lo > 1e-6 {
                prop_assert!(f_beta(lo, hi, 3.0) > f_beta(hi, lo, 3.0));
            }
            prop_assert!((f_beta(p, r, 1.0) - f_beta(r, p, 1.0)).abs() < 1e-12);
        }
    }
}

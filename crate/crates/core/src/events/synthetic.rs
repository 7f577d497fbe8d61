//! Synthetic completion-event generator.
//!
//! Stands in for real interaction logs. Each event gets a planted positive
//! probability
//!
//! ```text
//! p = sigmoid(sharpness * (w * s_telemetry + (1 - w) * s_context) + offset)
//! ```
//!
//! where `s_telemetry` grows with the (log) time since the last completion
//! and with JetBrains usage, and `s_context` rewards a cursor placed right
//! after a trigger token (`.`, `(`, `= `, `, `, `return `) at the end of a
//! line. Setting `telemetry_weight` to 1 or 0 isolates one modality.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{label, CompletionEvent, Dataset, Ide, InvocationKind, Provenance, Verdict};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub pool_size: usize,
    pub users: usize,
    /// `(language id, relative weight)`; ids outside the known map are fine.
    pub language_mix: Vec<(String, f64)>,
    /// Mixture weight of the telemetry predicate in the planted rule.
    pub telemetry_weight: f64,
    /// Logit scale of the planted rule; larger means less label noise.
    pub sharpness: f64,
    /// Share of positives that were manual invocations.
    pub manual_share: f64,
    /// Acceptance probability of a manual invocation (does not affect labels).
    pub manual_accept_rate: f64,
    pub ground_truth_fraction: f64,
    pub jetbrains_share: f64,
    /// Range of code lines before the cursor line.
    pub prefix_lines: (usize, usize),
    /// Range of code lines after the cursor line.
    pub suffix_lines: (usize, usize),
    /// Probability that a gap to the previous event exceeds the session timeout.
    pub session_break_rate: f64,
    pub start_timestamp: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let mix = [
            ("python", 0.30),
            ("javascript", 0.12),
            ("typescript", 0.10),
            ("java", 0.10),
            ("go", 0.05),
            ("rust", 0.05),
            ("cpp", 0.05),
            ("c", 0.03),
            ("csharp", 0.03),
            ("php", 0.03),
            ("typescriptreact", 0.03),
            ("ruby", 0.02),
            ("html", 0.02),
            ("css", 0.02),
            ("markdown", 0.02),
            ("kotlin", 0.02),
            ("scala", 0.01),
        ];
        SyntheticConfig {
            pool_size: 20_000,
            users: 200,
            language_mix: mix.iter().map(|(l, w)| (l.to_string(), *w)).collect(),
            telemetry_weight: 0.5,
            sharpness: 6.0,
            manual_share: 0.93,
            manual_accept_rate: 0.5,
            ground_truth_fraction: 0.8,
            jetbrains_share: 0.45,
            prefix_lines: (1, 4),
            suffix_lines: (0, 3),
            session_break_rate: 0.02,
            start_timestamp: 1_700_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Invalid(m.to_string()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if self.users == 0 {
            return bad("users must be positive");
        }
        if self.language_mix.is_empty()
            || self.language_mix.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0))
            || self.language_mix.iter().all(|(_, w)| *w == 0.0)
        {
            return bad("language_mix needs nonnegative weights with a positive total");
        }
        for (name, v) in [
            ("telemetry_weight", self.telemetry_weight),
            ("manual_share", self.manual_share),
            ("manual_accept_rate", self.manual_accept_rate),
            ("ground_truth_fraction", self.ground_truth_fraction),
            ("jetbrains_share", self.jetbrains_share),
            ("session_break_rate", self.session_break_rate),
        ] {
            if !unit(v) {
                return Err(SyntheticError::Invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return bad("sharpness must be positive");
        }
        if self.prefix_lines.0 > self.prefix_lines.1 || self.suffix_lines.0 > self.suffix_lines.1 {
            return bad("line ranges must be ordered (min, max)");
        }
        Ok(())
    }
}

const IDENTS: &[&str] = &[
    "items", "result", "value", "config", "data", "node", "count", "index", "user", "path",
    "buffer", "handler", "request", "response", "total", "name", "parser", "cache", "queue",
    "state",
];
const METHODS: &[&str] = &[
    "append", "get", "update", "format", "split", "join", "read", "write", "parse", "load",
    "keys", "items", "strip", "lower",
];
const WORDS: &[&str] = &[
    "check", "the", "value", "before", "we", "return", "update", "cache", "when", "needed",
    "this", "is", "slow",
];

/// Log-time mean and spread of the time since the last completion (ms).
const T1_LOG_MEAN: f64 = 7.0;
const T1_LOG_STD: f64 = 1.2;
const IDE_EFFECT: f64 = 0.6;
const CONTEXT_TRIGGER_WEIGHT: f64 = 1.0;
const CONTEXT_EOL_WEIGHT: f64 = 0.8;
const CONTEXT_OFFSET: f64 = -0.5;

struct CursorLine {
    prefix_part: String,
    suffix_part: String,
    continuation: String,
    trigger: bool,
    end_of_line: bool,
}

struct Gen<'a> {
    rng: rng::Rng,
    cfg: &'a SyntheticConfig,
}

impl Gen<'_> {
    fn pick<'s>(&mut self, xs: &'s [&'s str]) -> &'s str {
        xs[self.rng.gen_range(0..xs.len())]
    }

    fn indent(&mut self) -> String {
        " ".repeat(4 * self.rng.gen_range(0..3))
    }

    fn filler_line(&mut self) -> String {
        let ind = self.indent();
        let a = self.pick(IDENTS);
        let b = self.pick(IDENTS);
        let m = self.pick(METHODS);
        let n: u32 = self.rng.gen_range(0..100);
        match self.rng.gen_range(0..7) {
            0 => format!("{ind}{a} = {b}.{m}({n})"),
            1 => format!("{ind}if {a} > {n}:"),
            2 => format!("{ind}return {a}"),
            3 => {
                let w1 = self.pick(WORDS);
                let w2 = self.pick(WORDS);
                format!("{ind}# {w1} {w2}")
            }
            4 => format!("{ind}for {a} in {b}:"),
            5 => format!("{ind}{a}.{m}({b})"),
            _ => format!("{ind}print(\"{a} {b}\")"),
        }
    }

    fn cursor_line(&mut self) -> CursorLine {
        let ind = self.indent();
        let a = self.pick(IDENTS);
        let b = self.pick(IDENTS);
        let m = self.pick(METHODS);
        let trigger = self.rng.gen_bool(0.5);
        let end_of_line = self.rng.gen_bool(0.5);
        let (prefix_part, continuation) = if trigger {
            match self.rng.gen_range(0..5) {
                0 => (format!("{ind}{a} = {b}."), format!("{m}()")),
                1 => (format!("{ind}{a}.{m}("), format!("{b})")),
                2 => (format!("{ind}{a} = "), format!("{b}.{m}()")),
                3 => (format!("{ind}{a}({b}, "), format!("{m})")),
                _ => (format!("{ind}return "), format!("{a}.{m}({b})")),
            }
        } else {
            let n: u32 = self.rng.gen_range(10..1000);
            let cut = 1 + self.rng.gen_range(0..a.len() - 1);
            match self.rng.gen_range(0..4) {
                0 => (format!("{ind}{b} = {}", &a[..cut]), a[cut..].to_string()),
                1 => (format!("{ind}{a} = {n}"), ";".to_string()),
                2 => {
                    let w = self.pick(WORDS);
                    (format!("{ind}# {w} {}", &b[..cut.min(b.len() - 1)]), String::new())
                }
                _ => (format!("{ind}{a}.{m}({b})"), String::new()),
            }
        };
        let suffix_part = if end_of_line {
            String::new()
        } else {
            match self.rng.gen_range(0..3) {
                0 => ")".to_string(),
                1 => format!("{b})"),
                _ => format!(" + {n}", n = self.rng.gen_range(0..10)),
            }
        };
        CursorLine {
            prefix_part,
            suffix_part,
            continuation,
            trigger,
            end_of_line,
        }
    }

    fn event(&mut self, languages: &WeightedIndex<f64>, user_clock: &mut [i64]) -> CompletionEvent {
        let cfg = self.cfg;
        let n_pre = self.rng.gen_range(cfg.prefix_lines.0..=cfg.prefix_lines.1);
        let n_suf = self.rng.gen_range(cfg.suffix_lines.0..=cfg.suffix_lines.1);
        let mut prefix = String::new();
        for _ in 0..n_pre {
            prefix.push_str(&self.filler_line());
            prefix.push('\n');
        }
        let line = self.cursor_line();
        prefix.push_str(&line.prefix_part);
        let mut suffix = line.suffix_part.clone();
        for _ in 0..n_suf {
            suffix.push('\n');
            suffix.push_str(&self.filler_line());
        }
        if n_suf == 0 && line.end_of_line && self.rng.gen_bool(0.5) {
            suffix.push('\n');
        }

        let t1_log = Normal::new(T1_LOG_MEAN, T1_LOG_STD).expect("valid normal").sample(&mut self.rng);
        let t1 = t1_log.exp().round().max(0.0) as u64;
        let ide = if self.rng.gen_bool(cfg.jetbrains_share) { Ide::Jetbrains } else { Ide::Vscode };
        let language = cfg.language_mix[languages.sample(&mut self.rng)].0.clone();

        let extra_before: u64 = self.rng.gen_range(0..3000);
        let extra_after: u64 = self.rng.gen_range(0..2000);
        let prefix_chars = prefix.chars().count() as u64;
        let suffix_chars = suffix.chars().count() as u64;

        // planted rule
        let z_time = ((t1 as f64).ln_1p() - T1_LOG_MEAN) / T1_LOG_STD;
        let ide_sign = if ide == Ide::Jetbrains { 1.0 } else { -1.0 };
        let s_tel = (z_time + IDE_EFFECT * ide_sign) / (1.0 + IDE_EFFECT * IDE_EFFECT).sqrt();
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        let s_ctx = CONTEXT_TRIGGER_WEIGHT * sign(line.trigger)
            + CONTEXT_EOL_WEIGHT * sign(line.end_of_line)
            + CONTEXT_OFFSET;
        let w = cfg.telemetry_weight;
        let logit = cfg.sharpness * (w * s_tel + (1.0 - w) * s_ctx);
        let p = 1.0 / (1.0 + (-logit).exp());
        let positive = self.rng.gen_bool(p.clamp(0.0, 1.0));

        let (invocation_kind, verdict) = if positive {
            if self.rng.gen_bool(cfg.manual_share) {
                let v = if self.rng.gen_bool(cfg.manual_accept_rate) {
                    Verdict::Accepted
                } else {
                    Verdict::Rejected
                };
                (InvocationKind::Manual, v)
            } else {
                (InvocationKind::Automatic, Verdict::Accepted)
            }
        } else {
            (InvocationKind::Automatic, Verdict::Rejected)
        };

        let completion = if verdict == Verdict::Accepted && self.rng.gen_bool(0.7) {
            line.continuation.clone()
        } else {
            format!("{}.{}()", self.pick(IDENTS), self.pick(METHODS))
        };
        let ground_truth = self
            .rng
            .gen_bool(cfg.ground_truth_fraction)
            .then(|| format!("{}{}", line.prefix_part.trim_start(), line.continuation));

        let user = self.rng.gen_range(0..cfg.users);
        let mut gap = t1 as i64;
        if self.rng.gen_bool(cfg.session_break_rate) {
            gap += self.rng.gen_range(31..240) * 60_000;
        }
        user_clock[user] += gap;

        CompletionEvent {
            prefix,
            suffix,
            timestamp: user_clock[user],
            time_since_last_completion: t1,
            document_length: extra_before + prefix_chars + suffix_chars + extra_after,
            cursor_offset: extra_before + prefix_chars,
            language,
            ide,
            invocation_kind,
            verdict,
            ground_truth,
            completion: Some(completion),
            user_id: format!("user-{user:04}"),
            session_hint: None,
        }
    }
}

/// Generates a labeled pool; deterministic given `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset, SyntheticError> {
    config.validate()?;
    let languages = WeightedIndex::new(config.language_mix.iter().map(|(_, w)| *w))
        .map_err(|e| SyntheticError::Invalid(e.to_string()))?;
    let mut gen = Gen {
        rng: rng::seeded(seed, "synthetic-events"),
        cfg: config,
    };
    let mut user_clock: Vec<i64> = (0..config.users)
        .map(|u| config.start_timestamp + (u as i64) * 1_000)
        .collect();
    let samples = (0..config.pool_size)
        .map(|_| label(gen.event(&languages, &mut user_clock)))
        .collect();
    Ok(Dataset {
        samples,
        provenance: Provenance::Synthetic,
        seed: Some(seed),
    })
}

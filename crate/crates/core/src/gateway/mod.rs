//! The decision service and its offline twin.
//!
//! [`decide`] applies the hard rules, runs the model and never fails: any
//! internal error or panic turns into an invocation (fail-open), since a
//! suppressed useful completion costs more than a wasted one. The serve
//! loop speaks newline-delimited JSON; replay routes logged events through
//! several filters with session-level A/B assignment.

mod replay;
mod serve;

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{CompletionEvent, Ide};
use crate::features::telemetry_from_parts;
use crate::models::{EncoderClassifier, LogisticFilter, ModelError};
use crate::tokenizer::{Tokenizer, TokenizerError};

pub use replay::{replay, sessionize, sessionize_log, FilterArmReport, ReplayReport, SessionAssignment, SESSION_GAP_MS};
pub use serve::{serve_lines, serve_tcp, ErrorReply, LatencyHistogram, ServeStats};

/// Prompts (prefix + suffix) shorter than this many Unicode scalar values
/// are suppressed before any model work.
pub const MIN_PROMPT_CHARS: usize = 10;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One decision request. Telemetry fields mirror [`CompletionEvent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRequest {
    pub request_id: String,
    pub prefix: String,
    pub suffix: String,
    #[serde(default)]
    pub timestamp: i64,
    #[serde(default)]
    pub time_since_last_completion: u64,
    #[serde(default)]
    pub document_length: u64,
    #[serde(default)]
    pub cursor_offset: u64,
    #[serde(default)]
    pub language: String,
    #[serde(default = "default_ide")]
    pub ide: Ide,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
}

fn default_ide() -> Ide {
    Ide::Vscode
}

impl FilterRequest {
    pub fn from_event(request_id: impl Into<String>, e: &CompletionEvent) -> Self {
        FilterRequest {
            request_id: request_id.into(),
            prefix: e.prefix.clone(),
            suffix: e.suffix.clone(),
            timestamp: e.timestamp,
            time_since_last_completion: e.time_since_last_completion,
            document_length: e.document_length,
            cursor_offset: e.cursor_offset,
            language: e.language.clone(),
            ide: e.ide,
            user_id: Some(e.user_id.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    Model,
    MinLengthRule,
    /// The optional mid-line rule fired.
    MidLineRule,
    ErrorFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub request_id: String,
    pub invoke: bool,
    /// Positive-class probability; 0 when a hard rule suppressed the
    /// request and 1 on the error fallback.
    pub score: f64,
    pub latency_ms: f64,
    pub reason: DecisionReason,
}

/// What stands behind a filter arm.
#[derive(Debug, Clone)]
pub enum FilterArm {
    /// Always invoke.
    None,
    Logistic(Arc<LogisticFilter>),
    Encoder {
        model: Arc<EncoderClassifier<f32>>,
        tokenizer: Arc<Tokenizer>,
    },
}

impl FilterArm {
    pub fn kind(&self) -> &'static str {
        match self {
            FilterArm::None => "none",
            FilterArm::Logistic(_) => "logistic",
            FilterArm::Encoder { .. } => "encoder",
        }
    }
}

/// Fault modes for exercising the fail-open path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    /// The model step returns an error.
    Error = 1,
    /// The model step panics.
    Panic = 2,
    /// The model returns a non-finite score.
    NonFinite = 3,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("model produced a non-finite score")]
    NonFiniteScore,
    #[error("injected fault")]
    Injected,
    #[error("model step panicked: {0}")]
    Panicked(String),
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

/// A named, immutable filter plus counters.
#[derive(Debug)]
pub struct Filter {
    pub name: String,
    pub arm: FilterArm,
    /// Invoke iff score ≥ threshold.
    pub threshold: f64,
    /// Also suppress prompts whose cursor sits mid-line (off by default).
    pub mid_line_rule: bool,
    invocations: AtomicU64,
    fallbacks: AtomicU64,
    fault: AtomicU8,
}

impl Filter {
    pub fn new(name: impl Into<String>, arm: FilterArm) -> Self {
        Filter {
            name: name.into(),
            arm,
            threshold: DEFAULT_THRESHOLD,
            mid_line_rule: false,
            invocations: AtomicU64::new(0),
            fallbacks: AtomicU64::new(0),
            fault: AtomicU8::new(0),
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, GatewayError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(GatewayError::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn with_mid_line_rule(mut self, on: bool) -> Self {
        self.mid_line_rule = on;
        self
    }

    /// Times the feature/model stage ran.
    pub fn model_invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Times a decision fell back to invoking after an internal failure.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Makes every following model step fail in the given way; `None`
    /// restores normal operation. Safe to call while requests are in flight.
    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.fault.store(fault.map_or(0, |f| f as u8), Ordering::SeqCst);
    }

    fn score(&self, req: &FilterRequest) -> Result<f64, GatewayError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        match self.fault.load(Ordering::SeqCst) {
            1 => return Err(GatewayError::Injected),
            2 => panic!("injected fault"),
            3 => return Err(GatewayError::NonFiniteScore),
            _ => {}
        }
        let telemetry = || {
            telemetry_from_parts(
                req.time_since_last_completion,
                req.document_length,
                req.cursor_offset,
                &req.language,
                req.ide,
            )
        };
        let p = match &self.arm {
            FilterArm::None => 1.0,
            FilterArm::Logistic(m) => {
                let fv = m.encoder().encode_parts(&telemetry(), &req.prefix, &req.suffix);
                m.predict(&fv).map_err(ModelError::from)?
            }
            FilterArm::Encoder { model, tokenizer } => {
                let t = model.tokenization;
                let ctx = tokenizer.encode_context(&req.prefix, &req.suffix, t.strategy, t.window, t.suffix_cap)?;
                let fv = model
                    .features
                    .as_ref()
                    .map(|enc| enc.encode_parts(&telemetry(), &req.prefix, &req.suffix));
                model.predict_proba(&ctx, fv.as_ref())?
            }
        };
        if p.is_finite() {
            Ok(p)
        } else {
            Err(GatewayError::NonFiniteScore)
        }
    }
}

/// Unicode scalar values of prefix + suffix.
pub fn prompt_chars(req: &FilterRequest) -> usize {
    req.prefix.chars().count() + req.suffix.chars().count()
}

const CLOSING: &[char] = &[')', ']', '}', '"', '\'', '`', ';', ',', '>'];

/// The cursor is mid-line when the rest of its line holds anything other
/// than whitespace and closing characters.
pub fn cursor_mid_line(suffix: &str) -> bool {
    let rest = suffix.split('\n').next().unwrap_or("");
    rest.chars().any(|c| !c.is_whitespace() && !CLOSING.contains(&c))
}

/// Decides one request. Never fails: errors and panics inside the model
/// step are logged and answered with `invoke = true`.
pub fn decide(filter: &Filter, request: &FilterRequest) -> FilterDecision {
    let start = Instant::now();
    let (invoke, score, reason) = if prompt_chars(request) < MIN_PROMPT_CHARS {
        (false, 0.0, DecisionReason::MinLengthRule)
    } else if filter.mid_line_rule && cursor_mid_line(&request.suffix) {
        (false, 0.0, DecisionReason::MidLineRule)
    } else {
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| filter.score(request))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| e.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            Err(GatewayError::Panicked(msg))
        });
        match outcome {
            Ok(p) => (p >= filter.threshold, p, DecisionReason::Model),
            Err(err) => {
                filter.fallbacks.fetch_add(1, Ordering::Relaxed);
                log::error!("filter `{}` request {}: {err}; invoking", filter.name, request.request_id);
                (true, 1.0, DecisionReason::ErrorFallback)
            }
        }
    };
    FilterDecision {
        request_id: request.request_id.clone(),
        invoke,
        score,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        reason,
    }
}

//! Completion events and the labeling objective.
//!
//! A completion event is positive (the filter should let it through) when it
//! was invoked manually, regardless of whether the suggestion was accepted,
//! or when it was invoked automatically and accepted. Automatic invocations
//! that were rejected form the negative class.

mod balance;
mod log;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use balance::{balance, BalanceError, BalanceStrategy};
pub use log::{read_log, read_log_str, write_log, write_log_string, LogError, LogMode, LogRead};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ide {
    Jetbrains,
    Vscode,
}

impl Ide {
    pub const ALL: [Ide; 2] = [Ide::Jetbrains, Ide::Vscode];

    pub fn index(self) -> usize {
        match self {
            Ide::Jetbrains => 0,
            Ide::Vscode => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ide::Jetbrains => "jetbrains",
            Ide::Vscode => "vscode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvocationKind {
    Manual,
    Automatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected,
}

/// One invocation of the completion system.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompletionEvent {
    /// Code before the cursor.
    pub prefix: String,
    /// Code after the cursor.
    pub suffix: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    /// Milliseconds since the previous completion of this user.
    pub time_since_last_completion: u64,
    /// Characters in the whole document.
    pub document_length: u64,
    /// Cursor position in characters from the start of the document.
    pub cursor_offset: u64,
    pub language: String,
    pub ide: Ide,
    pub invocation_kind: InvocationKind,
    pub verdict: Verdict,
    /// Content of the cursor line 30 seconds after the request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// The suggestion that was shown, when the log recorded it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("cursor_offset {cursor_offset} exceeds document_length {document_length}")]
    CursorPastEnd {
        cursor_offset: u64,
        document_length: u64,
    },
    #[error("prefix and suffix hold {context} characters but document_length is {document_length}")]
    ContextLongerThanDocument { context: u64, document_length: u64 },
}

impl CompletionEvent {
    pub fn validate(&self) -> Result<(), EventError> {
        if self.cursor_offset > self.document_length {
            return Err(EventError::CursorPastEnd {
                cursor_offset: self.cursor_offset,
                document_length: self.document_length,
            });
        }
        let context = (self.prefix.chars().count() + self.suffix.chars().count()) as u64;
        if context > self.document_length {
            return Err(EventError::ContextLongerThanDocument {
                context,
                document_length: self.document_length,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subclass {
    Manual,
    AutoAccepted,
    AutoRejected,
}

impl Subclass {
    pub const ALL: [Subclass; 3] = [Subclass::Manual, Subclass::AutoAccepted, Subclass::AutoRejected];

    pub fn index(self) -> usize {
        match self {
            Subclass::Manual => 0,
            Subclass::AutoAccepted => 1,
            Subclass::AutoRejected => 2,
        }
    }

    pub fn label(self) -> Label {
        match self {
            Subclass::Manual | Subclass::AutoAccepted => Label::Positive,
            Subclass::AutoRejected => Label::Negative,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subclass::Manual => "manual",
            Subclass::AutoAccepted => "auto_accepted",
            Subclass::AutoRejected => "auto_rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Class index used by the classifiers: negative = 0, positive = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub event: CompletionEvent,
    pub subclass: Subclass,
    pub label: Label,
}

/// Assigns subclass and label. Manual invocations are positive whatever
/// their verdict.
pub fn label(event: CompletionEvent) -> LabeledSample {
    let subclass = match (event.invocation_kind, event.verdict) {
        (InvocationKind::Manual, _) => Subclass::Manual,
        (InvocationKind::Automatic, Verdict::Accepted) => Subclass::AutoAccepted,
        (InvocationKind::Automatic, Verdict::Rejected) => Subclass::AutoRejected,
    };
    LabeledSample {
        event,
        subclass,
        label: subclass.label(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealLog,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub provenance: Provenance,
    /// Generator seed; only meaningful for synthetic data.
    pub seed: Option<u64>,
}

/// Per-subclass sample counts, indexed by [`Subclass::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubclassCounts {
    pub manual: usize,
    pub auto_accepted: usize,
    pub auto_rejected: usize,
}

impl SubclassCounts {
    pub fn get(&self, s: Subclass) -> usize {
        match s {
            Subclass::Manual => self.manual,
            Subclass::AutoAccepted => self.auto_accepted,
            Subclass::AutoRejected => self.auto_rejected,
        }
    }

    fn bump(&mut self, s: Subclass) {
        match s {
            Subclass::Manual => self.manual += 1,
            Subclass::AutoAccepted => self.auto_accepted += 1,
            Subclass::AutoRejected => self.auto_rejected += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.manual + self.auto_accepted + self.auto_rejected
    }
}

impl Dataset {
    pub fn from_events(events: impl IntoIterator<Item = CompletionEvent>, provenance: Provenance) -> Self {
        Dataset {
            samples: events.into_iter().map(label).collect(),
            provenance,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subclass_counts(&self) -> SubclassCounts {
        let mut c = SubclassCounts::default();
        for s in &self.samples {
            c.bump(s.subclass);
        }
        c
    }

    /// Keeps the samples at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            provenance: self.provenance,
            seed: self.seed,
        }
    }

    /// Deterministic split into `(train, held_out)` with roughly
    /// `held_out_fraction` of the samples held out.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::rng::seeded(seed, "dataset-split"));
        let n_out = ((self.len() as f64) * held_out_fraction).round() as usize;
        let (out, keep) = idx.split_at(n_out.min(self.len()));
        let mut keep = keep.to_vec();
        let mut out = out.to_vec();
        keep.sort_unstable();
        out.sort_unstable();
        (self.select(&keep), self.select(&out))
    }

    /// `k` disjoint folds for 9:1-style train/eval splits; fold `i` is the
    /// evaluation part of split `i`.
    pub fn folds(&self, k: usize, seed: u64) -> Vec<(Dataset, Dataset)> {
        use rand::seq::SliceRandom;
        let k = k.max(1);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::rng::seeded(seed, "dataset-folds"));
        (0..k)
            .map(|fold| {
                let mut train = Vec::new();
                let mut eval = Vec::new();
                for (pos, &i) in idx.iter().enumerate() {
                    if k > 1 && pos % k == fold {
                        eval.push(i);
                    } else {
                        train.push(i);
                    }
                }
                if k == 1 {
                    // single split: hold out a tenth
                    let n_eval = self.len() / 10;
                    eval = train.split_off(train.len() - n_eval);
                }
                train.sort_unstable();
                eval.sort_unstable();
                (self.select(&train), self.select(&eval))
            })
            .collect()
    }
}

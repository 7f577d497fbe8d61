//! Training-set balancing by undersampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, Label, Subclass, Verdict};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    /// Keep the dataset as is.
    Unbalanced,
    /// Undersample the majority label down to the minority label.
    Classes,
    /// Undersample every subclass to the smallest subclass count.
    Subclasses,
    /// Like `Subclasses`, but the manual quota is filled with manual
    /// accepted events first and topped up with manual rejected ones.
    Biased,
}

impl std::str::FromStr for BalanceStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unbalanced" => Ok(Self::Unbalanced),
            "classes" => Ok(Self::Classes),
            "subclasses" => Ok(Self::Subclasses),
            "biased" => Ok(Self::Biased),
            other => Err(format!("unknown balancing strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BalanceError {
    #[error("cannot balance an empty dataset")]
    Empty,
    #[error("subclass `{}` has no samples", .0.as_str())]
    EmptySubclass(Subclass),
    #[error("label `{0:?}` has no samples")]
    EmptyLabel(Label),
}

/// Returns a subset of `dataset` (original order preserved) following
/// `strategy`. Sampling is uniform without replacement and seeded.
pub fn balance(dataset: &Dataset, strategy: BalanceStrategy, seed: u64) -> Result<Dataset, BalanceError> {
    if dataset.is_empty() {
        return Err(BalanceError::Empty);
    }
    if strategy == BalanceStrategy::Unbalanced {
        return Ok(dataset.clone());
    }
    let mut rng = rng::seeded(seed, "balance");
    let mut keep: Vec<usize> = Vec::new();

    match strategy {
        BalanceStrategy::Unbalanced => unreachable!(),
        BalanceStrategy::Classes => {
            let pos: Vec<usize> = positions(dataset, |s| s.label == Label::Positive);
            let neg: Vec<usize> = positions(dataset, |s| s.label == Label::Negative);
            if pos.is_empty() {
                return Err(BalanceError::EmptyLabel(Label::Positive));
            }
            if neg.is_empty() {
                return Err(BalanceError::EmptyLabel(Label::Negative));
            }
            let quota = pos.len().min(neg.len());
            keep.extend(sample(&mut rng, &pos, quota));
            keep.extend(sample(&mut rng, &neg, quota));
        }
        BalanceStrategy::Subclasses | BalanceStrategy::Biased => {
            let groups: Vec<Vec<usize>> = Subclass::ALL
                .iter()
                .map(|&sc| positions(dataset, |s| s.subclass == sc))
                .collect();
            for (sc, g) in Subclass::ALL.iter().zip(&groups) {
                if g.is_empty() {
                    return Err(BalanceError::EmptySubclass(*sc));
                }
            }
            let quota = groups.iter().map(Vec::len).min().unwrap_or(0);
            for (sc, g) in Subclass::ALL.iter().zip(&groups) {
                if strategy == BalanceStrategy::Biased && *sc == Subclass::Manual {
                    let (accepted, rejected): (Vec<usize>, Vec<usize>) = g
                        .iter()
                        .partition(|&&i| dataset.samples[i].event.verdict == Verdict::Accepted);
                    if accepted.len() >= quota {
                        keep.extend(sample(&mut rng, &accepted, quota));
                    } else {
                        keep.extend(accepted.iter().copied());
                        keep.extend(sample(&mut rng, &rejected, quota - accepted.len()));
                    }
                } else {
                    keep.extend(sample(&mut rng, g, quota));
                }
            }
        }
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

fn positions(dataset: &Dataset, pred: impl Fn(&super::LabeledSample) -> bool) -> Vec<usize> {
    dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| pred(s))
        .map(|(i, _)| i)
        .collect()
}

fn sample(rng: &mut rng::Rng, pool: &[usize], amount: usize) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|j| pool[j])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{label, CompletionEvent, Ide, InvocationKind, Provenance};
    use std::collections::HashSet;

    fn pool(manual_acc: usize, manual_rej: usize, auto_acc: usize, auto_rej: usize) -> Dataset {
        let mut events = Vec::new();
        let mut push = |n: usize, kind, verdict| {
            for _ in 0..n {
                let i = events.len() as i64;
                events.push(CompletionEvent {
                    prefix: String::new(),
                    suffix: String::new(),
                    timestamp: i,
                    time_since_last_completion: 0,
                    document_length: 0,
                    cursor_offset: 0,
                    language: "go".into(),
                    ide: Ide::Vscode,
                    invocation_kind: kind,
                    verdict,
                    ground_truth: None,
                    completion: None,
                    user_id: "u".into(),
                    session_hint: None,
                });
            }
        };
        push(manual_acc, InvocationKind::Manual, Verdict::Accepted);
        push(manual_rej, InvocationKind::Manual, Verdict::Rejected);
        push(auto_acc, InvocationKind::Automatic, Verdict::Accepted);
        push(auto_rej, InvocationKind::Automatic, Verdict::Rejected);
        Dataset {
            samples: events.into_iter().map(label).collect(),
            provenance: Provenance::RealLog,
            seed: None,
        }
    }

    #[test]
    fn subclasses_on_the_test_distribution() {
        // manual 6118, auto accepted 431, auto rejected 15889
        let ds = pool(3200, 2918, 431, 15889);
        let out = balance(&ds, BalanceStrategy::Subclasses, 1).unwrap();
        let c = out.subclass_counts();
        assert_eq!((c.manual, c.auto_accepted, c.auto_rejected), (431, 431, 431));
    }

    #[test]
    fn unbalanced_is_identity() {
        let ds = pool(3, 4, 5, 6);
        assert_eq!(balance(&ds, BalanceStrategy::Unbalanced, 9).unwrap(), ds);
    }

    #[test]
    fn classes_matches_minority_label() {
        let ds = pool(3, 4, 5, 40);
        let c = balance(&ds, BalanceStrategy::Classes, 2).unwrap();
        let pos = c.samples.iter().filter(|s| s.label.is_positive()).count();
        assert_eq!(pos, 12);
        assert_eq!(c.len(), 24);
    }

    #[test]
    fn biased_prefers_manual_accepted() {
        let ds = pool(5, 50, 20, 30);
        let out = balance(&ds, BalanceStrategy::Biased, 3).unwrap();
        let c = out.subclass_counts();
        assert_eq!((c.manual, c.auto_accepted, c.auto_rejected), (20, 20, 20));
        let acc = out
            .samples
            .iter()
            .filter(|s| s.subclass == Subclass::Manual && s.event.verdict == Verdict::Accepted)
            .count();
        assert_eq!(acc, 5);

        // more accepted than the quota: all drawn from accepted
        let ds = pool(30, 50, 20, 30);
        let out = balance(&ds, BalanceStrategy::Biased, 3).unwrap();
        assert!(out
            .samples
            .iter()
            .filter(|s| s.subclass == Subclass::Manual)
            .all(|s| s.event.verdict == Verdict::Accepted));
    }

    #[test]
    fn empty_subclass_is_an_error() {
        let ds = pool(3, 4, 0, 6);
        assert_eq!(
            balance(&ds, BalanceStrategy::Subclasses, 0),
            Err(BalanceError::EmptySubclass(Subclass::AutoAccepted))
        );
        assert_eq!(balance(&ds, BalanceStrategy::Unbalanced, 0).unwrap().len(), 13);
    }

    #[test]
    fn strategies_are_deterministic_subsets() {
        let ds = pool(17, 23, 11, 60);
        for strat in [
            BalanceStrategy::Unbalanced,
            BalanceStrategy::Classes,
            BalanceStrategy::Subclasses,
            BalanceStrategy::Biased,
        ] {
            let a = balance(&ds, strat, 5).unwrap();
            let b = balance(&ds, strat, 5).unwrap();
            assert_eq!(a, b);
            let ts: HashSet<i64> = a.samples.iter().map(|s| s.event.timestamp).collect();
            assert_eq!(ts.len(), a.len(), "no duplicates");
            assert!(a.samples.iter().all(|s| ds.samples.contains(s)));
        }
    }
}

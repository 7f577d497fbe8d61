//! Session-level A/B assignment and log replay.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::Serialize;

use super::{decide, Filter, FilterArm, FilterRequest, GatewayError};
use crate::eval::{f3_proxy, OnlineReport, OnlineTally, Scorer};
use crate::events::{CompletionEvent, Dataset, Verdict};
use crate::rng;

/// Requests of one user further apart than this start a new session.
pub const SESSION_GAP_MS: i64 = 30 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionAssignment {
    pub session_id: String,
    pub user_id: String,
    pub arm: String,
    pub start: i64,
    pub end: i64,
    /// Indices of the session's events, in time order.
    pub events: Vec<usize>,
}

fn arm_index(user: &str, start: i64, salt: &str, arms: usize) -> usize {
    let key = format!("{user}\u{1f}{start}\u{1f}{salt}");
    (rng::mix64(rng::fnv1a64(key.as_bytes())) % arms as u64) as usize
}

/// Splits one user's events at gaps over 30 minutes and assigns each
/// session an arm by hashing (user, session start, salt). Event indices
/// refer to `events`. Unordered input is sorted by timestamp first.
pub fn sessionize(
    events: &[&CompletionEvent],
    arms: &[String],
    salt: &str,
) -> Result<Vec<SessionAssignment>, GatewayError> {
    if arms.is_empty() {
        return Err(GatewayError::InvalidConfig("at least one arm is required".into()));
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    if events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        log::warn!("events are not in time order; sorting by timestamp");
        order.sort_by_key(|&i| events[i].timestamp);
    }
    let mut sessions: Vec<SessionAssignment> = Vec::new();
    for i in order {
        let e = events[i];
        match sessions.last_mut() {
            Some(s) if e.timestamp - s.end <= SESSION_GAP_MS => {
                s.end = e.timestamp;
                s.events.push(i);
            }
            _ => {
                let key = format!("{}\u{1f}{}", e.user_id, e.timestamp);
                sessions.push(SessionAssignment {
                    session_id: format!("{:016x}", rng::fnv1a64(key.as_bytes())),
                    user_id: e.user_id.clone(),
                    arm: arms[arm_index(&e.user_id, e.timestamp, salt, arms.len())].clone(),
                    start: e.timestamp,
                    end: e.timestamp,
                    events: vec![i],
                });
            }
        }
    }
    Ok(sessions)
}

/// Sessions of every user of `log`, users in lexicographic order; event
/// indices refer to `log.samples`.
pub fn sessionize_log(log: &Dataset, arms: &[String], salt: &str) -> Result<Vec<SessionAssignment>, GatewayError> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in log.samples.iter().enumerate() {
        by_user.entry(&s.event.user_id).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in by_user.values() {
        let events: Vec<&CompletionEvent> = idx.iter().map(|&i| &log.samples[i].event).collect();
        for mut s in sessionize(&events, arms, salt)? {
            s.events.iter_mut().for_each(|e| *e = idx[*e]);
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterArmReport {
    pub kind: String,
    pub sessions: usize,
    #[serde(flatten)]
    pub online: OnlineReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub seed: u64,
    pub salt: String,
    pub events: usize,
    pub sessions: usize,
    pub arms: Vec<FilterArmReport>,
}

impl ReplayReport {
    pub fn arm(&self, name: &str) -> Option<&FilterArmReport> {
        self.arms.iter().find(|a| a.online.arm == name)
    }

    pub fn table(&self) -> String {
        let online: Vec<OnlineReport> = self.arms.iter().map(|a| a.online.clone()).collect();
        OnlineReport::table(&online)
    }

    /// JSON report. Measured latencies differ from run to run, so they are
    /// left out unless asked for; everything else depends only on the log,
    /// the filters and the seed.
    pub fn to_json(&self, include_latency: bool) -> String {
        let mut r = self.clone();
        if !include_latency {
            r.arms.iter_mut().for_each(|a| a.online.latency = None);
        }
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Routes every logged event through the arm its session is assigned to
/// and tallies what each arm would have shown and had accepted. Accepted
/// completions are scored against their ground truth when `scorer` is
/// given. The first arm without a model is the baseline for relative
/// acceptance rates.
pub fn replay(
    log: &Dataset,
    arms: &[Arc<Filter>],
    scorer: Option<&Scorer>,
    seed: u64,
) -> Result<ReplayReport, GatewayError> {
    let names: Vec<String> = arms.iter().map(|f| f.name.clone()).collect();
    if names.iter().collect::<HashSet<_>>().len() != names.len() {
        return Err(GatewayError::InvalidConfig("arm names must be distinct".into()));
    }
    let salt = format!("replay-{seed}");
    let sessions = sessionize_log(log, &names, &salt)?;
    let mut tallies = vec![OnlineTally::default(); arms.len()];
    let mut session_counts = vec![0usize; arms.len()];
    for s in &sessions {
        let a = names.iter().position(|n| *n == s.arm).expect("arm comes from the list");
        session_counts[a] += 1;
        let t = &mut tallies[a];
        for &i in &s.events {
            let e = &log.samples[i].event;
            let d = decide(&arms[a], &FilterRequest::from_event(i.to_string(), e));
            t.received += 1;
            t.latencies_ms.push(d.latency_ms);
            if !d.invoke {
                t.filtered += 1;
                continue;
            }
            t.shown += 1;
            if e.verdict != Verdict::Accepted {
                continue;
            }
            t.accepted += 1;
            let score = match (scorer, e.completion.as_deref(), e.ground_truth.as_deref()) {
                (Some(sc), Some(c), Some(g)) if !g.is_empty() => match f3_proxy(c, g, sc) {
                    Ok(v) => Some(v),
                    Err(err) => {
                        log::warn!("event {i}: scoring failed: {err}");
                        None
                    }
                },
                _ => None,
            };
            match score {
                Some(v) => t.scores.push(v),
                None => t.unscored_accepted += 1,
            }
        }
    }
    let baseline = arms.iter().position(|f| matches!(f.arm, FilterArm::None));
    if baseline.is_none() {
        log::warn!("no pass-through arm; relative rates are absent");
    }
    let base_fraction = baseline.map(|b| {
        let t = &tallies[b];
        if t.received == 0 {
            0.0
        } else {
            t.accepted as f64 / t.received as f64
        }
    });
    let scorer_name = scorer.map_or_else(|| "none (no scorer given)".to_string(), Scorer::name);
    let reports = arms
        .iter()
        .enumerate()
        .map(|(a, f)| FilterArmReport {
            kind: f.arm.kind().to_string(),
            sessions: session_counts[a],
            online: OnlineReport::from_tally(&f.name, &tallies[a], base_fraction, Some(a) == baseline, &scorer_name),
        })
        .collect();
    Ok(ReplayReport {
        seed,
        salt,
        events: log.len(),
        sessions: sessions.len(),
        arms: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{label, Ide, InvocationKind, Provenance};

    fn event(user: &str, minute: i64, verdict: Verdict, prefix: &str) -> CompletionEvent {
        CompletionEvent {
            prefix: prefix.into(),
            suffix: String::new(),
            timestamp: minute * 60_000,
            time_since_last_completion: 1000,
            document_length: 100,
            cursor_offset: 50,
            language: "python".into(),
            ide: Ide::Vscode,
            invocation_kind: InvocationKind::Automatic,
            verdict,
            ground_truth: None,
            completion: None,
            user_id: user.into(),
            session_hint: None,
        }
    }

    fn arms(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("arm{i}")).collect()
    }

    #[test]
    fn gaps_split_sessions() {
        let evs = [event("u", 0, Verdict::Accepted, ""), event("u", 10, Verdict::Accepted, ""), event("u", 50, Verdict::Accepted, "")];
        let refs: Vec<_> = evs.iter().collect();
        let s = sessionize(&refs, &arms(3), "x").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].events, [0, 1]);
        assert_eq!((s[0].start, s[0].end), (0, 600_000));
        assert_eq!(sessionize(&refs[..1], &arms(3), "x").unwrap().len(), 1);
        // exactly thirty minutes apart still shares a session
        let edge = [event("u", 0, Verdict::Accepted, ""), event("u", 30, Verdict::Accepted, "")];
        assert_eq!(sessionize(&edge.iter().collect::<Vec<_>>(), &arms(1), "x").unwrap().len(), 1);
        assert!(sessionize(&refs, &[], "x").is_err());
    }

    #[test]
    fn unordered_input_is_sorted() {
        let evs = [event("u", 50, Verdict::Accepted, ""), event("u", 0, Verdict::Accepted, ""), event("u", 10, Verdict::Accepted, "")];
        let s = sessionize(&evs.iter().collect::<Vec<_>>(), &arms(2), "x").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].events, [1, 2]);
        assert_eq!(s[1].events, [0]);
    }

    #[test]
    fn arms_balance_over_users() {
        let names = arms(5);
        let mut counts = [0usize; 5];
        for u in 0..1000 {
            let e = event(&format!("user-{u}"), 0, Verdict::Accepted, "");
            let s = sessionize(&[&e], &names, "balance").unwrap();
            counts[names.iter().position(|n| *n == s[0].arm).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.2).abs() < 0.05, "{counts:?}");
        }
    }

    fn log() -> Dataset {
        let mut events = Vec::new();
        for u in 0..40 {
            for k in 0..6 {
                let verdict = if (u + k) % 3 == 0 { Verdict::Accepted } else { Verdict::Rejected };
                let prefix = if k % 2 == 0 { "x = 1" } else { "def f(a, b):\n    return" };
                events.push(event(&format!("u{u}"), k * 45 * (u % 2) + k, verdict, prefix));
            }
        }
        Dataset {
            samples: events.into_iter().map(label).collect(),
            provenance: Provenance::Synthetic,
            seed: None,
        }
    }

    #[test]
    fn replay_accounting() {
        let d = log();
        let arms = vec![
            Arc::new(Filter::new("none", FilterArm::None)),
            Arc::new(Filter::new("strict", FilterArm::None).with_threshold(1.0).unwrap().with_mid_line_rule(true)),
        ];
        let r = replay(&d, &arms, None, 4).unwrap();
        assert_eq!(r.arms.iter().map(|a| a.online.received).sum::<usize>(), d.len());
        for a in &r.arms {
            let o = &a.online;
            assert_eq!(o.filtered + o.shown, o.received);
            assert!(o.accepted <= o.shown);
            assert_eq!(o.unscored_accepted, o.accepted);
        }
        assert_eq!(r.arm("none").unwrap().online.relative_rate, Some(1.0));
        // only the 5-character prompts are filtered, whichever arm sees them
        assert_eq!(r.arms.iter().map(|a| a.online.filtered).sum::<usize>(), d.len() / 2);
        assert_eq!(r.to_json(false), replay(&d, &arms, None, 4).unwrap().to_json(false));
    }

    #[test]
    fn no_baseline_no_relative_rate() {
        let d = log();
        let arms = vec![Arc::new(Filter::new("a", FilterArm::None).with_mid_line_rule(true))];
        let mut r = replay(&d, &arms, None, 1).unwrap();
        assert_eq!(r.arms[0].online.relative_rate, Some(1.0));
        let lone = Filter::new("b", FilterArm::Logistic(Arc::new(crate::models::LogisticFilter::zeros(
            crate::features::FeatureMask::baseline(),
            Default::default(),
        ))));
        r = replay(&d, &[Arc::new(lone)], None, 1).unwrap();
        assert_eq!(r.arms[0].online.relative_rate, None);
        let dup = vec![Arc::new(Filter::new("a", FilterArm::None)), Arc::new(Filter::new("a", FilterArm::None))];
        assert!(replay(&d, &dup, None, 1).is_err());
    }
}

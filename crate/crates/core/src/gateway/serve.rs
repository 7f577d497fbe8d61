//! Newline-delimited JSON over standard streams or TCP.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{self, BufRead, BufReader, ErrorKind, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{decide, Filter, FilterRequest};
use crate::eval::{percentile, LatencySummary};

/// Upper bucket bounds in milliseconds; the last bucket is open.
const BOUNDS_MS: [f64; 13] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyHistogram {
    counts: [u64; BOUNDS_MS.len() + 1],
    samples: Vec<f64>,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            counts: [0; BOUNDS_MS.len() + 1],
            samples: Vec::new(),
        }
    }
}

impl LatencyHistogram {
    pub fn record(&mut self, ms: f64) {
        let b = BOUNDS_MS.iter().position(|&u| ms <= u).unwrap_or(BOUNDS_MS.len());
        self.counts[b] += 1;
        self.samples.push(ms);
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.samples.extend_from_slice(&other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn summary(&self) -> Option<LatencySummary> {
        LatencySummary::from_samples(&self.samples)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Bucket counts plus percentiles, one line per bucket.
    pub fn render(&self) -> String {
        let mut out = format!("decision latency, {} requests\n", self.len());
        let mut lower = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            match BOUNDS_MS.get(i) {
                Some(&u) => {
                    let _ = writeln!(out, "  ({lower:>6}, {u:>6}] ms {c:>8}");
                    lower = u;
                }
                None => {
                    let _ = writeln!(out, "  ({lower:>6},    inf) ms {c:>8}");
                }
            }
        }
        for q in [50.0, 95.0, 99.0] {
            if let Some(v) = percentile(&self.samples, q) {
                let _ = writeln!(out, "  p{q} {v:.3} ms");
            }
        }
        out
    }
}

/// Counters shared by every connection of one service.
#[derive(Debug, Default)]
pub struct ServeStats {
    pub histogram: Mutex<LatencyHistogram>,
    pub requests: AtomicU64,
    pub errors: AtomicU64,
}

impl ServeStats {
    pub fn snapshot(&self) -> LatencyHistogram {
        self.histogram.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Reply to a message that could not be decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub request_id: Option<String>,
    pub error: String,
}

fn request_id_of(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    match v.get("request_id")? {
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn handle(filter: &Filter, line: &str, seen: &mut HashSet<String>, stats: &ServeStats) -> String {
    let fail = |request_id: Option<String>, error: String| {
        stats.errors.fetch_add(1, Ordering::Relaxed);
        serde_json::to_string(&ErrorReply { request_id, error }).expect("reply serializes")
    };
    let req: FilterRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return fail(request_id_of(line), format!("malformed request: {e}")),
    };
    if !seen.insert(req.request_id.clone()) {
        return fail(Some(req.request_id), "request id already used on this connection".into());
    }
    let d = decide(filter, &req);
    stats.requests.fetch_add(1, Ordering::Relaxed);
    stats.histogram.lock().unwrap_or_else(|e| e.into_inner()).record(d.latency_ms);
    serde_json::to_string(&d).expect("decision serializes")
}

/// Answers one JSON request per line until end of input or `shutdown`.
/// Read timeouts on `input` are treated as a chance to check `shutdown`.
pub fn serve_lines<R: Read, W: Write>(
    filter: &Filter,
    input: R,
    mut output: W,
    stats: &ServeStats,
    shutdown: &AtomicBool,
) -> io::Result<()> {
    let mut reader = BufReader::new(input);
    let mut buf = Vec::new();
    let mut seen = HashSet::new();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => {
                if buf.is_empty() {
                    return Ok(());
                }
            }
            Ok(_) if buf.last() != Some(&b'\n') => continue,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                continue
            }
            Err(e) => return Err(e),
        }
        let at_eof = buf.last() != Some(&b'\n');
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim();
        if !line.is_empty() {
            let reply = handle(filter, line, &mut seen, stats);
            output.write_all(reply.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        buf.clear();
        if at_eof {
            return Ok(());
        }
    }
}

/// Accepts connections until `shutdown`, one thread per connection, then
/// waits for open connections to notice the shutdown.
pub fn serve_tcp(
    filter: Arc<Filter>,
    listener: TcpListener,
    stats: Arc<ServeStats>,
    shutdown: Arc<AtomicBool>,
) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(Duration::from_millis(100)))?;
                let _ = stream.set_nodelay(true);
                let (filter, stats, shutdown) = (Arc::clone(&filter), Arc::clone(&stats), Arc::clone(&shutdown));
                workers.push(thread::spawn(move || {
                    let writer = match stream.try_clone() {
                        Ok(w) => w,
                        Err(e) => return log::warn!("{peer}: {e}"),
                    };
                    if let Err(e) = serve_lines(&filter, stream, writer, &stats, &shutdown) {
                        log::warn!("{peer}: {e}");
                    }
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e),
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

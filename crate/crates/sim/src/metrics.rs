//! Per-run metrics and their `key=value` record form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub protocol: String,
    pub z: u16,
    pub n: u16,
    pub f: u16,
    pub batch_size: u32,
    pub seed: u64,
    /// Every client request was accepted and every non-faulty replica caught up.
    pub completed: bool,
    pub duration_ms: f64,
    /// Client transactions per simulated second.
    pub throughput_tps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub accepted_requests: u64,
    pub executed_txns: u64,
    /// Lowest executed round over non-faulty replicas.
    pub rounds_executed: u64,
    /// Replica-to-replica messages within a region.
    pub local_msgs: u64,
    /// Replica-to-replica messages between regions.
    pub global_msgs: u64,
    pub total_msgs: u64,
    /// Messages between clients and replicas.
    pub client_msgs: u64,
    pub global_bytes: u64,
    pub rejected_msgs: u64,
    pub view_changes_local: u64,
    pub view_changes_remote: u64,
    /// Highest honored remote view-change counter, if any was honored.
    pub max_honored_v: Option<u64>,
    /// Certifications of a round at least two ahead of the next round to execute.
    pub pipeline_overlap: u64,
    /// Keys `local.<kind>` and `global.<kind>`.
    pub by_kind: BTreeMap<String, u64>,
    pub safety_conflicts: u64,
    pub divergences: u64,
    pub client_conflicts: u64,
}

impl Metrics {
    pub fn kind(&self, scope: &str, kind: &str) -> u64 {
        self.by_kind.get(&format!("{scope}.{kind}")).copied().unwrap_or(0)
    }

    /// One self-describing line.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "protocol={} z={} n={} f={} batch={} seed={} completed={} duration_ms={:.3} throughput_tps={:.1} \
             latency_mean_ms={:.3} latency_p50_ms={:.3} latency_p99_ms={:.3} accepted={} executed_txns={} rounds={} \
             local_msgs={} global_msgs={} total_msgs={} client_msgs={} global_bytes={} rejected={} \
             view_changes_local={} view_changes_remote={} max_honored_v={} pipeline_overlap={} \
             safety_conflicts={} divergences={} client_conflicts={}",
            self.protocol,
            self.z,
            self.n,
            self.f,
            self.batch_size,
            self.seed,
            self.completed,
            self.duration_ms,
            self.throughput_tps,
            self.latency_mean_ms,
            self.latency_p50_ms,
            self.latency_p99_ms,
            self.accepted_requests,
            self.executed_txns,
            self.rounds_executed,
            self.local_msgs,
            self.global_msgs,
            self.total_msgs,
            self.client_msgs,
            self.global_bytes,
            self.rejected_msgs,
            self.view_changes_local,
            self.view_changes_remote,
            self.max_honored_v.map_or_else(|| "none".to_string(), |v| v.to_string()),
            self.pipeline_overlap,
            self.safety_conflicts,
            self.divergences,
            self.client_conflicts,
        );
        for (k, v) in &self.by_kind {
            let _ = write!(s, " {k}={v}");
        }
        s
    }

    /// Parses the fields [`Metrics::to_record`] writes; other keys are ignored.
    pub fn from_record(line: &str) -> Result<Metrics, RecordError> {
        let mut m = Metrics::default();
        let mut seen_protocol = false;
        for pair in line.split_whitespace() {
            let (key, value) = pair.split_once('=').ok_or_else(|| RecordError(pair.to_string()))?;
            let bad = || RecordError(pair.to_string());
            macro_rules! num {
                ($field:expr) => {
                    $field = value.parse().map_err(|_| bad())?
                };
            }
            match key {
                "protocol" => {
                    m.protocol = value.to_string();
                    seen_protocol = true;
                }
                "z" => num!(m.z),
                "n" => num!(m.n),
                "f" => num!(m.f),
                "batch" => num!(m.batch_size),
                "seed" => num!(m.seed),
                "completed" => num!(m.completed),
                "duration_ms" => num!(m.duration_ms),
                "throughput_tps" => num!(m.throughput_tps),
                "latency_mean_ms" => num!(m.latency_mean_ms),
                "latency_p50_ms" => num!(m.latency_p50_ms),
                "latency_p99_ms" => num!(m.latency_p99_ms),
                "accepted" => num!(m.accepted_requests),
                "executed_txns" => num!(m.executed_txns),
                "rounds" => num!(m.rounds_executed),
                "local_msgs" => num!(m.local_msgs),
                "global_msgs" => num!(m.global_msgs),
                "total_msgs" => num!(m.total_msgs),
                "client_msgs" => num!(m.client_msgs),
                "global_bytes" => num!(m.global_bytes),
                "rejected" => num!(m.rejected_msgs),
                "view_changes_local" => num!(m.view_changes_local),
                "view_changes_remote" => num!(m.view_changes_remote),
                "max_honored_v" => {
                    m.max_honored_v = match value {
                        "none" => None,
                        v => Some(v.parse().map_err(|_| bad())?),
                    }
                }
                "pipeline_overlap" => num!(m.pipeline_overlap),
                "safety_conflicts" => num!(m.safety_conflicts),
                "divergences" => num!(m.divergences),
                "client_conflicts" => num!(m.client_conflicts),
                k if k.starts_with("local.") || k.starts_with("global.") => {
                    m.by_kind.insert(k.to_string(), value.parse().map_err(|_| bad())?);
                }
                _ => {}
            }
        }
        if !seen_protocol {
            return Err(RecordError("protocol".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed metrics field {0:?}")]
pub struct RecordError(pub String);

/// Field-wise mean of numeric metrics; identity fields come from the first run.
/// The result does not depend on the order of `runs`.
pub fn average(runs: &[Metrics]) -> Option<Metrics> {
    let first = runs.first()?;
    let k = runs.len() as f64;
    let mean_f = |f: fn(&Metrics) -> f64| {
        let mut v: Vec<f64> = runs.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / k
    };
    let mean_u = |f: fn(&Metrics) -> u64| (runs.iter().map(f).sum::<u64>() as f64 / k).round() as u64;
    let mut by_kind: BTreeMap<String, u64> = BTreeMap::new();
    for run in runs {
        for (key, v) in &run.by_kind {
            *by_kind.entry(key.clone()).or_default() += v;
        }
    }
    for v in by_kind.values_mut() {
        *v = (*v as f64 / k).round() as u64;
    }
    Some(Metrics {
        protocol: first.protocol.clone(),
        z: first.z,
        n: first.n,
        f: first.f,
        batch_size: first.batch_size,
        seed: runs.iter().map(|m| m.seed).min().unwrap_or(0),
        completed: runs.iter().all(|m| m.completed),
        duration_ms: mean_f(|m| m.duration_ms),
        throughput_tps: mean_f(|m| m.throughput_tps),
        latency_mean_ms: mean_f(|m| m.latency_mean_ms),
        latency_p50_ms: mean_f(|m| m.latency_p50_ms),
        latency_p99_ms: mean_f(|m| m.latency_p99_ms),
        accepted_requests: mean_u(|m| m.accepted_requests),
        executed_txns: mean_u(|m| m.executed_txns),
        rounds_executed: mean_u(|m| m.rounds_executed),
        local_msgs: mean_u(|m| m.local_msgs),
        global_msgs: mean_u(|m| m.global_msgs),
        total_msgs: mean_u(|m| m.total_msgs),
        client_msgs: mean_u(|m| m.client_msgs),
        global_bytes: mean_u(|m| m.global_bytes),
        rejected_msgs: mean_u(|m| m.rejected_msgs),
        view_changes_local: mean_u(|m| m.view_changes_local),
        view_changes_remote: mean_u(|m| m.view_changes_remote),
        max_honored_v: runs.iter().filter_map(|m| m.max_honored_v).max(),
        pipeline_overlap: mean_u(|m| m.pipeline_overlap),
        by_kind,
        safety_conflicts: runs.iter().map(|m| m.safety_conflicts).sum(),
        divergences: runs.iter().map(|m| m.divergences).sum(),
        client_conflicts: runs.iter().map(|m| m.client_conflicts).sum(),
    })
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

//! Experiments over the simulator: repeated runs, baseline comparison,
//! parameter sweeps, ledger checks and trace dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use geobft_core::ordering::{import_ndjson, verify_ledger, ImportError, LedgerRejection};
use geobft_sim::engine::{crypto_for, logical_config, run, RunOptions, RunOutput};
use geobft_sim::metrics::{average, RecordError};
use geobft_sim::{Metrics, Protocol, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("no metrics record in {0}")]
    NoRecord(PathBuf),
    #[error("runs are not comparable: scenario keys {0} and {1} differ")]
    Mismatch(String, String),
    #[error("cannot sweep {axis} to {value}: {reason}")]
    Axis { axis: Axis, value: u64, reason: String },
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error(transparent)]
    Ledger(#[from] ImportError),
}

impl HarnessError {
    /// Process exit code: every harness error is a usage or input error.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

pub fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Protocol>,
    pub jitter_pct: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, scenario: &Scenario) -> Result<Scenario, HarnessError> {
        let mut s = scenario.clone();
        if let Some(seed) = self.seed {
            s.system.seed = seed;
        }
        if let Some(mode) = self.mode {
            s.mode.protocol = mode;
        }
        if let Some(jitter) = self.jitter_pct {
            s.latency.jitter_pct = jitter;
        }
        s.validate()?;
        Ok(s)
    }
}

/// One finished run and whatever it violated.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub metrics: Metrics,
    pub trace_digest: String,
    /// Empty when the run was safe and live.
    pub breaches: Vec<String>,
}

impl RunReport {
    pub fn from_output(out: &RunOutput) -> Self {
        RunReport {
            metrics: out.metrics.clone(),
            trace_digest: out.trace_digest.clone(),
            breaches: breaches(out),
        }
    }
}

/// Safety and liveness violations of a run, one line each.
pub fn breaches(out: &RunOutput) -> Vec<String> {
    let mut v = Vec::new();
    let s = &out.safety;
    for (height, a, b) in &s.divergent_heights {
        v.push(format!("ledgers of {a} and {b} differ at height {height}"));
    }
    for (id, why) in &s.ledger_rejections {
        v.push(format!("ledger of {id} fails verification: {why}"));
    }
    if s.conflict_notes > 0 {
        v.push(format!("{} conflicting certificates observed", s.conflict_notes));
    }
    if s.divergence_notes > 0 {
        v.push(format!("{} checkpoint divergences", s.divergence_notes));
    }
    if s.client_conflicts > 0 {
        v.push(format!("{} clients saw conflicting results", s.client_conflicts));
    }
    if !out.is_live() {
        v.push(format!(
            "not live: completed={} rounds_executed={} of {}",
            out.metrics.completed, out.metrics.rounds_executed, out.scenario.workload.batches
        ));
    }
    v
}

/// Repetitions of one scenario with seeds `seed, seed + 1, ...`.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub key: String,
    pub runs: Vec<RunReport>,
    pub average: Metrics,
}

impl Experiment {
    pub fn is_clean(&self) -> bool {
        self.runs.iter().all(|r| r.breaches.is_empty())
    }

    /// Per-run records followed by the average record.
    pub fn records(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .runs
            .iter()
            .map(|r| {
                format!(
                    "record=run key={} {} trace={}",
                    self.key,
                    r.metrics.to_record(),
                    r.trace_digest
                )
            })
            .collect();
        lines.push(format!(
            "record=average key={} runs={} {}",
            self.key,
            self.runs.len(),
            self.average.to_record()
        ));
        lines
    }
}

pub fn run_experiment(scenario: &Scenario, repetitions: u32) -> Result<Experiment, HarnessError> {
    if repetitions == 0 {
        return Err(HarnessError::NoRepetitions);
    }
    scenario.validate()?;
    let base = scenario.system.seed;
    let runs: Vec<RunReport> = (0..u64::from(repetitions))
        .into_par_iter()
        .map(|i| {
            let s = scenario.with_seed(base.wrapping_add(i));
            run(&s, &RunOptions::default()).map(|out| RunReport::from_output(&out))
        })
        .collect::<Result<_, _>>()?;
    let metrics: Vec<Metrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    Ok(Experiment {
        key: scenario.comparison_key(),
        runs,
        average: average(&metrics).expect("at least one run"),
    })
}

/// Writes the full event trace of `scenario` to `dir` and returns the path.
pub fn write_trace(scenario: &Scenario, dir: &Path) -> Result<PathBuf, HarnessError> {
    let lines = trace(scenario)?;
    let path = dir.join(format!(
        "geobft-{}-seed{}.trace",
        scenario.mode.protocol.name(),
        scenario.system.seed
    ));
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn trace(scenario: &Scenario) -> Result<Vec<String>, HarnessError> {
    let out = run(scenario, &RunOptions::full())?;
    Ok(out.trace.unwrap_or_default())
}

/// Average metrics of one protocol together with the scenario key they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub key: String,
    pub metrics: Metrics,
}

impl Summary {
    /// The last `record=average` line of a record file, or its only run record.
    pub fn from_records(text: &str, path: &Path) -> Result<Summary, HarnessError> {
        let line = text
            .lines()
            .rev()
            .find(|l| l.starts_with("record=average"))
            .or_else(|| text.lines().find(|l| l.starts_with("record=run")))
            .ok_or_else(|| HarnessError::NoRecord(path.to_path_buf()))?;
        let key = line
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("key="))
            .unwrap_or_default()
            .to_string();
        Ok(Summary {
            key,
            metrics: Metrics::from_record(line)?,
        })
    }
}

impl From<&Experiment> for Summary {
    fn from(e: &Experiment) -> Self {
        Summary {
            key: e.key.clone(),
            metrics: e.average.clone(),
        }
    }
}

/// Consensus decisions in a run: one per cluster per round.
pub fn decisions(m: &Metrics) -> u64 {
    let per_round = if m.protocol == Protocol::Geobft.name() {
        u64::from(m.z)
    } else {
        1
    };
    m.rounds_executed * per_round
}

pub fn global_per_decision(m: &Metrics) -> f64 {
    match decisions(m) {
        0 => 0.0,
        d => m.global_msgs as f64 / d as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub subject: Summary,
    pub baseline: Summary,
    pub throughput_ratio: f64,
    pub latency_ratio: f64,
    pub global_per_decision_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        a / b
    }
}

pub fn compare(subject: &Summary, baseline: &Summary) -> Result<Comparison, HarnessError> {
    if subject.key != baseline.key {
        return Err(HarnessError::Mismatch(subject.key.clone(), baseline.key.clone()));
    }
    let (s, b) = (&subject.metrics, &baseline.metrics);
    Ok(Comparison {
        subject: subject.clone(),
        baseline: baseline.clone(),
        throughput_ratio: ratio(s.throughput_tps, b.throughput_tps),
        latency_ratio: ratio(s.latency_mean_ms, b.latency_mean_ms),
        global_per_decision_ratio: ratio(global_per_decision(s), global_per_decision(b)),
    })
}

impl Comparison {
    pub fn to_record(&self) -> String {
        let (s, b) = (&self.subject.metrics, &self.baseline.metrics);
        format!(
            "record=compare key={} subject={} baseline={} subject_tps={:.1} baseline_tps={:.1} throughput_ratio={:.4} \
             subject_latency_ms={:.3} baseline_latency_ms={:.3} latency_ratio={:.4} \
             subject_global_per_decision={:.3} baseline_global_per_decision={:.3} global_per_decision_ratio={:.4}",
            self.subject.key,
            s.protocol,
            b.protocol,
            s.throughput_tps,
            b.throughput_tps,
            self.throughput_ratio,
            s.latency_mean_ms,
            b.latency_mean_ms,
            self.latency_ratio,
            global_per_decision(s),
            global_per_decision(b),
            self.global_per_decision_ratio,
        )
    }
}

/// Runs `scenario` under GeoBFT and under flat PBFT and compares the two.
pub fn compare_modes(
    scenario: &Scenario,
    repetitions: u32,
) -> Result<(Experiment, Experiment, Comparison), HarnessError> {
    let mut geo = scenario.clone();
    geo.mode.protocol = Protocol::Geobft;
    let mut flat = scenario.clone();
    flat.mode.protocol = Protocol::FlatPbft;
    let g = run_experiment(&geo, repetitions)?;
    let f = run_experiment(&flat, repetitions)?;
    let c = compare(&Summary::from(&g), &Summary::from(&f))?;
    Ok((g, f, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Number of clusters at a fixed total replica count.
    Clusters,
    /// Replicas per cluster.
    Replicas,
    BatchSize,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Clusters => "clusters",
            Axis::Replicas => "replicas",
            Axis::BatchSize => "batch_size",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clusters" => Ok(Axis::Clusters),
            "replicas" => Ok(Axis::Replicas),
            "batch_size" | "batch-size" | "batch" => Ok(Axis::BatchSize),
            other => Err(format!(
                "unknown axis {other:?}; expected clusters, replicas or batch_size"
            )),
        }
    }
}

/// Largest `f` with `n > 3f`.
pub fn max_faults(n: u16) -> u16 {
    n.saturating_sub(1) / 3
}

/// `base` with `axis` set to `value`. Fault counts follow `f = (n - 1) / 3`.
pub fn with_axis(base: &Scenario, axis: Axis, value: u64) -> Result<Scenario, HarnessError> {
    let err = |reason: String| HarnessError::Axis { axis, value, reason };
    let v = u16::try_from(value).map_err(|_| err("value too large".into()))?;
    let mut s = base.clone();
    match axis {
        Axis::BatchSize => {
            s.system.batch_size = u32::from(v);
        }
        Axis::Replicas => {
            s.system.n = v;
            s.system.f = max_faults(v);
        }
        Axis::Clusters => {
            let total = base.system.total_replicas();
            if v == 0 || !total.is_multiple_of(usize::from(v)) {
                return Err(err(format!("{total} replicas do not split into {v} clusters")));
            }
            let n = (total / usize::from(v)) as u16;
            s.system.z = v;
            s.system.n = n;
            s.system.f = max_faults(n);
            let z = usize::from(v);
            if let Some(regions) = &mut s.latency.regions {
                regions.truncate(z);
            }
            for m in [&mut s.latency.rtt_ms, &mut s.latency.bandwidth_mbps]
                .into_iter()
                .flatten()
            {
                m.truncate(z);
                for row in m.iter_mut() {
                    row.truncate(z);
                }
            }
        }
    }
    s.validate().map_err(|e| err(e.to_string()))?;
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: u64,
    pub experiment: Experiment,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(base: &Scenario, axis: Axis, values: &[u64], repetitions: u32) -> Result<Sweep, HarnessError> {
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|&v| with_axis(base, axis, v))
        .collect::<Result<_, _>>()?;
    let rows = values
        .iter()
        .zip(&scenarios)
        .map(|(&value, s)| {
            Ok(SweepRow {
                value,
                experiment: run_experiment(s, repetitions)?,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(Sweep { axis, rows })
}

impl Sweep {
    pub fn is_clean(&self) -> bool {
        self.rows.iter().all(|r| r.experiment.is_clean())
    }

    pub fn throughputs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.experiment.average.throughput_tps).collect()
    }

    /// Columnar table, one row per value.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>10} {:>10} {:>4} {:>4} {:>4} {:>14} {:>12} {:>12} {:>12} {:>8}\n",
            self.axis, "protocol", "z", "n", "f", "throughput_tps", "latency_ms", "global_msgs", "local_msgs", "clean"
        );
        for row in &self.rows {
            let m = &row.experiment.average;
            let _ = writeln!(
                out,
                "{:>10} {:>10} {:>4} {:>4} {:>4} {:>14.1} {:>12.3} {:>12} {:>12} {:>8}",
                row.value,
                m.protocol,
                m.z,
                m.n,
                m.f,
                m.throughput_tps,
                m.latency_mean_ms,
                m.global_msgs,
                m.local_msgs,
                row.experiment.is_clean()
            );
        }
        out
    }
}

/// Result of checking an exported ledger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LedgerCheck {
    Valid { blocks: usize, head: String },
    Rejected(LedgerRejection),
}

/// Checks an NDJSON ledger against the keys of the run that produced it.
pub fn check_ledger(scenario: &Scenario, text: &str) -> Result<LedgerCheck, HarnessError> {
    let blocks = import_ndjson(text)?;
    let config = logical_config(scenario);
    let crypto = crypto_for(scenario);
    Ok(match verify_ledger(&blocks, &config, &crypto) {
        Ok(head) => LedgerCheck::Valid {
            blocks: blocks.len(),
            head: head.to_hex(),
        },
        Err(rejection) => LedgerCheck::Rejected(rejection),
    })
}

/// Ledger of the first non-faulty replica of a run.
pub fn export_ledger(scenario: &Scenario) -> Result<String, HarnessError> {
    let out = run(scenario, &RunOptions::quiet())?;
    let ledger = out
        .non_faulty()
        .next()
        .map(|r| r.replica.ledger().export_ndjson())
        .unwrap_or_default();
    Ok(ledger)
}

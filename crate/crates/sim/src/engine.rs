//! The discrete-event loop.
//!
//! Time is in microseconds. Events are ordered by `(time, sequence)` with the
//! sequence assigned at insertion. Each replica has an inbox and a CPU: an
//! input occupies the CPU for the time the cost model charges, and the sends
//! it produces leave when it finishes. Every replica has one FIFO uplink; a
//! message waits for it, takes `bytes / bandwidth` of the region pair to
//! serialize, then propagates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use geobft_core::crypto::{
    derive_keypair, Crypto, CryptoSuite, KeyDirectory, KeyPair, Principal, ProductionSuite, TestSuite,
};
use geobft_core::local_replication::Suspicion;
use geobft_core::messages::{ClientResponse, Envelope, Message};
use geobft_core::ordering::verify_ledger;
use geobft_core::replica::{Effect, Input, Note, Replica, TimerKey};
use geobft_core::types::{ClientId, ClusterId, ReplicaId, Round, SimTime, SystemConfig, View};

use crate::client::{session_id, Delivery, Session};
use crate::cost::{CostModel, SizeModel};
use crate::faults::FaultPlan;
use crate::latency::LatencyMatrix;
use crate::metrics::{percentile, Metrics};
use crate::scenario::{CryptoChoice, Protocol, Scenario, ScenarioError};
use crate::trace::Trace;

/// How much of the event trace a run keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    /// Only the running digest.
    #[default]
    Digest,
    /// Digest, lines and the note log.
    Full,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub trace: TraceMode,
}

impl RunOptions {
    pub fn full() -> Self {
        RunOptions { trace: TraceMode::Full }
    }

    pub fn quiet() -> Self {
        RunOptions { trace: TraceMode::Off }
    }
}

/// The configuration replicas actually run: the scenario's for GeoBFT, one
/// cluster of `z * n` replicas for flat PBFT.
pub fn logical_config(scenario: &Scenario) -> SystemConfig {
    let s = &scenario.system;
    match scenario.mode.protocol {
        Protocol::Geobft => s.clone(),
        Protocol::FlatPbft => {
            let n = s.z * s.n;
            SystemConfig {
                z: 1,
                n,
                f: (n - 1) / 3,
                ..s.clone()
            }
        }
    }
}

pub struct FinalReplica {
    /// Id under the scenario's `[system]` shape.
    pub physical: ReplicaId,
    /// Id the replica runs under.
    pub logical: ReplicaId,
    pub region: String,
    pub faulty: bool,
    pub replica: Replica,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SafetyReport {
    /// Heights where two non-faulty replicas hold different blocks.
    pub divergent_heights: Vec<(u64, ReplicaId, ReplicaId)>,
    pub ledger_rejections: Vec<(ReplicaId, String)>,
    pub conflict_notes: u64,
    pub divergence_notes: u64,
    pub client_conflicts: u64,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        self.divergent_heights.is_empty()
            && self.ledger_rejections.is_empty()
            && self.conflict_notes == 0
            && self.divergence_notes == 0
            && self.client_conflicts == 0
    }
}

pub struct RunOutput {
    pub scenario: Scenario,
    pub logical: SystemConfig,
    pub metrics: Metrics,
    pub trace_digest: String,
    pub trace: Option<Vec<String>>,
    /// `(time, logical id, note)`, kept in [`TraceMode::Full`].
    pub notes: Vec<(SimTime, ReplicaId, Note)>,
    pub replicas: Vec<FinalReplica>,
    pub safety: SafetyReport,
}

impl RunOutput {
    pub fn non_faulty(&self) -> impl Iterator<Item = &FinalReplica> {
        self.replicas.iter().filter(|r| !r.faulty)
    }

    /// All requests accepted and every non-faulty replica executed at least
    /// one round per scheduled batch.
    pub fn is_live(&self) -> bool {
        self.metrics.completed
            && self
                .non_faulty()
                .all(|r| r.replica.executed_round().0 >= self.scenario.workload.batches)
    }
}

enum EventKind {
    Arrive {
        to: usize,
        env: Envelope,
    },
    Respond {
        session: usize,
        response: ClientResponse,
    },
    CpuFree(usize),
    Timer {
        replica: usize,
        key: TimerKey,
        generation: u64,
    },
    ClientTimer {
        session: usize,
        seq: u64,
    },
}

struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

enum Work {
    Deliver(Envelope),
    Timer(TimerKey, u64),
}

struct Node {
    replica: Replica,
    physical: ReplicaId,
    region: usize,
    faulty: bool,
    inbox: VecDeque<Work>,
    busy: bool,
    armed: BTreeMap<TimerKey, u64>,
    executed: u64,
}

#[derive(Default)]
struct Counters {
    local: u64,
    global: u64,
    client: u64,
    global_bytes: u64,
    by_kind: BTreeMap<String, u64>,
    rejected: u64,
    local_vc: BTreeSet<(ClusterId, View)>,
    remote_vc: BTreeSet<(ClusterId, View)>,
    max_honored_v: Option<u64>,
    pipeline_overlap: u64,
    conflicts: u64,
    divergences: u64,
    client_conflicts: u64,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    logical: SystemConfig,
    matrix: LatencyMatrix,
    size: SizeModel,
    cost: CostModel,
    plan: FaultPlan,
    nodes: Vec<Node>,
    sessions: Vec<Session>,
    session_of: BTreeMap<geobft_core::types::ClientId, usize>,
    /// Requests each region may still issue.
    budget: Vec<u64>,
    client_crypto: Crypto,
    queue: BinaryHeap<Event>,
    seq: u64,
    generation: u64,
    now: SimTime,
    /// Free time of each replica's uplink.
    uplinks: Vec<SimTime>,
    /// Last arrival per replica pair, keeping each pair FIFO.
    last_arrival: Vec<SimTime>,
    jitter_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
    workload_rng: ChaCha8Rng,
    trace: Trace,
    trace_mode: TraceMode,
    notes: Vec<(SimTime, ReplicaId, Note)>,
    counters: Counters,
    accepts: Vec<SimTime>,
    latencies: Vec<SimTime>,
    open_sessions: usize,
    draining: bool,
}

fn suite(choice: CryptoChoice) -> Arc<dyn CryptoSuite> {
    match choice {
        CryptoChoice::Test => Arc::new(TestSuite),
        CryptoChoice::Production => Arc::new(ProductionSuite),
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn principal_label(p: &Principal, sessions: &BTreeMap<geobft_core::types::ClientId, usize>) -> String {
    match p {
        Principal::Replica(id) => format!("R{}.{}", id.cluster.0, id.local),
        Principal::Client(c) => format!("c{}", sessions.get(c).copied().unwrap_or(usize::MAX)),
    }
}

struct KeySet {
    crypto: Crypto,
    replicas: Vec<KeyPair>,
    /// `(region, id, keys)` per client session.
    sessions: Vec<(usize, ClientId, KeyPair)>,
}

fn key_set(scenario: &Scenario) -> KeySet {
    let physical = &scenario.system;
    let logical = logical_config(scenario);
    let seed = physical.seed;
    let suite = suite(scenario.mode.crypto);
    let pairwise: [u8; 32] = Sha256::new()
        .chain_update(b"geobft/pairwise")
        .chain_update(seed.to_le_bytes())
        .finalize()
        .into();
    let mut directory = KeyDirectory::new(pairwise);
    let replicas: Vec<KeyPair> = (0..physical.total_replicas())
        .map(|i| {
            let id = ReplicaId::from_global_index(i, logical.n);
            derive_keypair(suite.as_ref(), seed, Principal::Replica(id))
        })
        .collect();
    let per_region = scenario.workload.clients * scenario.workload.depth;
    let mut sessions = Vec::new();
    for region in 0..usize::from(physical.z) {
        for index in 0..per_region {
            let id = session_id(region, index);
            sessions.push((region, id, derive_keypair(suite.as_ref(), seed, Principal::Client(id))));
        }
    }
    for k in replicas.iter().chain(sessions.iter().map(|(_, _, k)| k)) {
        directory.register(k.owner, k.public.clone());
    }
    KeySet {
        crypto: Crypto::new(suite, Arc::new(directory)),
        replicas,
        sessions,
    }
}

/// The key directory a run of `scenario` uses, for checking its ledgers.
pub fn crypto_for(scenario: &Scenario) -> Crypto {
    key_set(scenario).crypto
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, options: &RunOptions) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let physical = &scenario.system;
        let logical = logical_config(scenario);
        let matrix = scenario.latency.build(physical.z)?;
        let seed = physical.seed;
        let KeySet {
            crypto,
            replicas: replica_keys,
            sessions: session_keys,
        } = key_set(scenario);
        let total = physical.total_replicas();

        let plan = FaultPlan::new(&scenario.faults);
        let nodes: Vec<Node> = replica_keys
            .into_iter()
            .enumerate()
            .map(|(i, keys)| {
                let id = ReplicaId::from_global_index(i, logical.n);
                let phys = ReplicaId::from_global_index(i, physical.n);
                Node {
                    replica: Replica::new(id, logical.clone(), crypto.clone(), keys),
                    physical: phys,
                    region: i / usize::from(physical.n),
                    faulty: plan.is_faulty(phys),
                    inbox: VecDeque::new(),
                    busy: false,
                    armed: BTreeMap::new(),
                    executed: 0,
                }
            })
            .collect();
        let sessions: Vec<Session> = session_keys
            .into_iter()
            .map(|(region, id, keys)| {
                let cluster = match scenario.mode.protocol {
                    Protocol::Geobft => ClusterId::from_index(region),
                    Protocol::FlatPbft => ClusterId(1),
                };
                Session::new(id, keys, region, cluster)
            })
            .collect();
        let session_of = sessions.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let z = usize::from(physical.z);
        Ok(Sim {
            scenario,
            size: SizeModel {
                batch_size: u64::from(physical.batch_size),
                certificate_commits: u64::from(logical.n - logical.f),
            },
            logical,
            matrix,
            cost: scenario.cost.clone(),
            plan,
            nodes,
            sessions,
            session_of,
            budget: vec![scenario.workload.batches; z],
            client_crypto: crypto,
            queue: BinaryHeap::new(),
            seq: 0,
            generation: 0,
            now: 0,
            uplinks: vec![0; total],
            last_arrival: vec![0; total * total],
            jitter_rng: rng(seed, 1),
            drop_rng: rng(seed, 2),
            workload_rng: rng(seed, 3),
            trace: Trace::new(options.trace == TraceMode::Full),
            trace_mode: options.trace,
            notes: Vec::new(),
            counters: Counters::default(),
            accepts: Vec::new(),
            latencies: Vec::new(),
            open_sessions: 0,
            draining: false,
        })
    }

    fn push(&mut self, time: SimTime, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn tracing(&self) -> bool {
        self.trace_mode != TraceMode::Off
    }

    fn index(&self, id: ReplicaId) -> usize {
        id.global_index(self.logical.n)
    }

    // Clients.

    fn issue(&mut self, session: usize) {
        let region = self.sessions[session].region;
        if self.budget[region] == 0 {
            return;
        }
        self.budget[region] -= 1;
        self.open_sessions += 1;
        let now = self.now;
        let system = &self.scenario.system;
        let request = self.sessions[session].next_request(
            system.batch_size,
            self.scenario.workload.keyspace,
            now,
            &self.client_crypto,
            &mut self.workload_rng,
        );
        let _ = self.client_crypto.take_work();
        let seq = request.seq;
        let s = &self.sessions[session];
        let primary = ReplicaId {
            cluster: s.cluster,
            local: s.primary_local(&self.logical),
        };
        let message = Arc::new(Message::Request(request));
        self.client_send(session, primary, message);
        let timeout = self.scenario.client_timeout_ms() * 1000;
        self.push(now + timeout, EventKind::ClientTimer { session, seq });
    }

    fn client_send(&mut self, session: usize, to: ReplicaId, message: Arc<Message>) {
        let s = &self.sessions[session];
        let env = Envelope {
            from: Principal::Client(s.id),
            to: Principal::Replica(to),
            message,
            tag: None,
        };
        self.counters.client += 1;
        let r = self.index(to);
        let delay = self
            .matrix
            .deliver_delay_us(s.region, self.nodes[r].region, &mut self.jitter_rng);
        self.push(self.now + delay, EventKind::Arrive { to: r, env });
    }

    fn client_timeout(&mut self, session: usize, seq: u64) {
        let s = &mut self.sessions[session];
        let Some(out) = &mut s.outstanding else {
            return;
        };
        if out.request.seq != seq {
            return;
        }
        out.retries += 1;
        let retries = out.retries;
        let message = Arc::new(Message::Request(out.request.clone()));
        let cluster = s.cluster;
        for to in self.logical.cluster_members(cluster).collect::<Vec<_>>() {
            self.client_send(session, to, message.clone());
        }
        let timeout = (self.scenario.client_timeout_ms() * 1000) << retries.min(6);
        self.push(self.now + timeout, EventKind::ClientTimer { session, seq });
    }

    fn respond(&mut self, session: usize, response: ClientResponse) {
        let logical = self.logical.clone();
        match self.sessions[session].on_response(response, self.now, &logical) {
            Delivery::Accepted { latency } => {
                self.accepts.push(self.now);
                self.latencies.push(latency);
                self.open_sessions -= 1;
                if self.tracing() {
                    let line = format!("{} A c{} {} {}", self.now, session, self.sessions[session].seq, latency);
                    self.trace.push(line);
                }
                self.issue(session);
            }
            Delivery::Conflict => self.counters.client_conflicts += 1,
            Delivery::Waiting | Delivery::Ignored => {}
        }
    }

    // Replicas.

    fn arrive(&mut self, r: usize, env: Envelope) {
        if self.plan.is_crashed(self.nodes[r].physical, self.now) {
            return;
        }
        self.nodes[r].inbox.push_back(Work::Deliver(env));
        if !self.nodes[r].busy {
            self.process(r);
        }
    }

    fn timer(&mut self, r: usize, key: TimerKey, generation: u64) {
        if self.nodes[r].armed.get(&key) != Some(&generation) || self.plan.is_crashed(self.nodes[r].physical, self.now)
        {
            return;
        }
        self.nodes[r].inbox.push_back(Work::Timer(key, generation));
        if !self.nodes[r].busy {
            self.process(r);
        }
    }

    fn process(&mut self, r: usize) {
        let input = loop {
            match self.nodes[r].inbox.pop_front() {
                None => {
                    self.nodes[r].busy = false;
                    return;
                }
                Some(Work::Deliver(env)) => {
                    if self.tracing() {
                        let line = format!(
                            "{} D {} {} {}",
                            self.now,
                            principal_label(&env.from, &self.session_of),
                            principal_label(&env.to, &self.session_of),
                            env.message.kind().name()
                        );
                        self.trace.push(line);
                    }
                    break Input::Deliver(env);
                }
                Some(Work::Timer(key, generation)) => {
                    if self.draining || self.nodes[r].armed.get(&key) != Some(&generation) {
                        continue;
                    }
                    self.nodes[r].armed.remove(&key);
                    if self.tracing() {
                        let id = self.nodes[r].replica.id();
                        let line = format!("{} T R{}.{} {:?}", self.now, id.cluster.0, id.local, key);
                        self.trace.push(line);
                    }
                    break Input::Timer(key);
                }
            }
        };
        let node = &mut self.nodes[r];
        let effects = node.replica.handle(input, self.now);
        let work = node.replica.crypto().take_work();
        let txns: u64 = effects
            .iter()
            .map(|e| match e {
                Effect::Note(Note::Executed { txns, .. }) => *txns,
                _ => 0,
            })
            .sum();
        let done = self.now + self.cost.charge(work, self.size.request_bytes(), txns);
        node.busy = true;
        self.apply(r, effects, done);
        self.push(done, EventKind::CpuFree(r));
    }

    fn apply(&mut self, r: usize, effects: Vec<Effect>, at: SimTime) {
        for effect in effects {
            match effect {
                Effect::Send(env) => self.send(r, env, at),
                Effect::SetTimer { key, after } => {
                    if self.draining {
                        continue;
                    }
                    self.generation += 1;
                    let generation = self.generation;
                    self.nodes[r].armed.insert(key, generation);
                    self.push(
                        at + after,
                        EventKind::Timer {
                            replica: r,
                            key,
                            generation,
                        },
                    );
                }
                Effect::CancelTimer(key) => {
                    self.nodes[r].armed.remove(&key);
                }
                Effect::Note(note) => self.note(r, note),
            }
        }
    }

    fn note(&mut self, r: usize, note: Note) {
        let id = self.nodes[r].replica.id();
        let c = &mut self.counters;
        match &note {
            Note::Executed { round, .. } => self.nodes[r].executed = round.0,
            Note::Certified { round, .. } => {
                if round.0 >= self.nodes[r].replica.executed_round().0 + 2 {
                    c.pipeline_overlap += 1;
                }
            }
            Note::ShareRejected { .. } | Note::BadAuth => c.rejected += 1,
            Note::ViewChangeStarted { view, reason } => {
                if *reason == Suspicion::Remote {
                    c.remote_vc.insert((id.cluster, *view));
                }
            }
            Note::ViewChangeCompleted { view } => {
                if !self.nodes[r].faulty {
                    c.local_vc.insert((id.cluster, *view));
                }
            }
            Note::RvcHonored { v, .. } => c.max_honored_v = c.max_honored_v.max(Some(*v)),
            Note::SafetyConflict { .. } => {
                if !self.nodes[r].faulty {
                    c.conflicts += 1;
                }
            }
            Note::Divergence(_) if !self.nodes[r].faulty => {
                c.divergences += 1;
            }
            _ => {}
        }
        if self.tracing() {
            let line = format!("{} N R{}.{} {:?}", self.now, id.cluster.0, id.local, note);
            self.trace.push(line);
            if self.trace_mode == TraceMode::Full {
                self.notes.push((self.now, id, note));
            }
        }
    }

    fn send(&mut self, r: usize, env: Envelope, at: SimTime) {
        let from = self.nodes[r].physical;
        if self.plan.is_crashed(from, at) {
            return;
        }
        let bytes = self.size.bytes(&env.message);
        let from_region = self.nodes[r].region;
        match env.to {
            Principal::Client(client) => {
                let Some(&session) = self.session_of.get(&client) else {
                    return;
                };
                let Message::Response(response) = env.message.as_ref() else {
                    return;
                };
                self.counters.client += 1;
                let to_region = self.sessions[session].region;
                let start = self.uplinks[r].max(at);
                let end = start + self.matrix.serialization_us(from_region, to_region, bytes);
                self.uplinks[r] = end;
                let arrival = end
                    + self
                        .matrix
                        .deliver_delay_us(from_region, to_region, &mut self.jitter_rng);
                self.push(
                    arrival,
                    EventKind::Respond {
                        session,
                        response: response.clone(),
                    },
                );
            }
            Principal::Replica(to_id) => {
                let to = self.index(to_id);
                let to_phys = self.nodes[to].physical;
                if self.plan.suppresses(from, Some(to_phys), &env.message, at) {
                    return;
                }
                let to_region = self.nodes[to].region;
                let scope = if from_region == to_region { "local" } else { "global" };
                if from_region == to_region {
                    self.counters.local += 1;
                } else {
                    self.counters.global += 1;
                    self.counters.global_bytes += bytes;
                }
                *self
                    .counters
                    .by_kind
                    .entry(format!("{scope}.{}", env.message.kind().name()))
                    .or_default() += 1;
                if from_region != to_region
                    && self.plan.drop_global > 0.0
                    && self.drop_rng.gen_bool(self.plan.drop_global)
                {
                    return;
                }
                let start = self.uplinks[r].max(at);
                let end = start + self.matrix.serialization_us(from_region, to_region, bytes);
                self.uplinks[r] = end;
                let propagated = end
                    + self
                        .matrix
                        .deliver_delay_us(from_region, to_region, &mut self.jitter_rng);
                let pair = r * self.nodes.len() + to;
                let arrival = propagated.max(self.last_arrival[pair]);
                self.last_arrival[pair] = arrival;
                self.push(arrival, EventKind::Arrive { to, env });
            }
        }
    }

    fn caught_up(&self) -> bool {
        let mut rounds = self
            .nodes
            .iter()
            .filter(|n| !n.faulty && !n.replica.is_halted())
            .map(|n| n.executed);
        match rounds.next() {
            Some(first) => rounds.all(|r| r == first),
            None => true,
        }
    }

    fn run(mut self) -> RunOutput {
        let cap = self.scenario.run.time_cap_ms * 1000;
        for session in 0..self.sessions.len() {
            self.issue(session);
        }
        let mut stopped_at = None;
        while let Some(event) = self.queue.pop() {
            if stopped_at.is_none() && event.time > cap {
                break;
            }
            self.now = event.time;
            if self.draining && matches!(event.kind, EventKind::Timer { .. } | EventKind::ClientTimer { .. }) {
                continue;
            }
            match event.kind {
                EventKind::Arrive { to, env } => self.arrive(to, env),
                EventKind::Respond { session, response } => {
                    if !self.draining {
                        self.respond(session, response);
                    }
                }
                EventKind::CpuFree(r) => self.process(r),
                EventKind::Timer {
                    replica,
                    key,
                    generation,
                } => self.timer(replica, key, generation),
                EventKind::ClientTimer { session, seq } => self.client_timeout(session, seq),
            }
            if stopped_at.is_none()
                && self.open_sessions == 0
                && self.budget.iter().all(|b| *b == 0)
                && self.caught_up()
            {
                stopped_at = Some(self.now);
                self.draining = true;
            }
        }
        let completed = stopped_at.is_some();
        let duration = stopped_at.unwrap_or(self.now.min(cap));
        self.finish(completed, duration)
    }

    fn finish(self, completed: bool, duration: SimTime) -> RunOutput {
        let system = &self.scenario.system;
        let safety = safety_report(&self.nodes, &self.logical, &self.client_crypto, &self.counters);
        let c = &self.counters;
        let batch = u64::from(system.batch_size);
        let mut accepts = self.accepts.clone();
        accepts.sort_unstable();
        let throughput = throughput_tps(&accepts, batch);
        let mut lat: Vec<f64> = self.latencies.iter().map(|l| *l as f64 / 1000.0).collect();
        lat.sort_by(f64::total_cmp);
        let mean = if lat.is_empty() {
            0.0
        } else {
            lat.iter().sum::<f64>() / lat.len() as f64
        };
        let healthy = || self.nodes.iter().filter(|n| !n.faulty);
        let metrics = Metrics {
            protocol: self.scenario.mode.protocol.name().to_string(),
            z: system.z,
            n: system.n,
            f: system.f,
            batch_size: system.batch_size,
            seed: system.seed,
            completed,
            duration_ms: duration as f64 / 1000.0,
            throughput_tps: throughput,
            latency_mean_ms: mean,
            latency_p50_ms: percentile(&lat, 50.0),
            latency_p99_ms: percentile(&lat, 99.0),
            accepted_requests: accepts.len() as u64,
            executed_txns: healthy().map(|n| n.replica.state().executed_txns()).min().unwrap_or(0),
            rounds_executed: healthy().map(|n| n.replica.executed_round().0).min().unwrap_or(0),
            local_msgs: c.local,
            global_msgs: c.global,
            total_msgs: c.local + c.global,
            client_msgs: c.client,
            global_bytes: c.global_bytes,
            rejected_msgs: c.rejected,
            view_changes_local: c.local_vc.len() as u64,
            view_changes_remote: c.remote_vc.len() as u64,
            max_honored_v: c.max_honored_v,
            pipeline_overlap: c.pipeline_overlap,
            by_kind: c.by_kind.clone(),
            safety_conflicts: safety.conflict_notes + safety.divergent_heights.len() as u64,
            divergences: safety.divergence_notes + safety.ledger_rejections.len() as u64,
            client_conflicts: safety.client_conflicts,
        };
        let mut trace = self.trace;
        trace.push(metrics.to_record());
        let trace_digest = trace.digest();
        let replicas = self
            .nodes
            .into_iter()
            .map(|n| FinalReplica {
                physical: n.physical,
                logical: n.replica.id(),
                region: self.matrix.regions[n.region].clone(),
                faulty: n.faulty,
                replica: n.replica,
            })
            .collect();
        RunOutput {
            scenario: self.scenario.clone(),
            logical: self.logical,
            metrics,
            trace_digest,
            trace: trace.into_lines(),
            notes: self.notes,
            replicas,
            safety,
        }
    }
}

/// Transactions per second over the middle 80% of accepted requests, or over
/// the whole run when there are fewer than 20.
pub fn throughput_tps(sorted_accepts: &[SimTime], batch: u64) -> f64 {
    let n = sorted_accepts.len();
    if n == 0 {
        return 0.0;
    }
    if n >= 20 {
        let (lo, hi) = (n / 10, n - n / 10 - 1);
        let span = sorted_accepts[hi] - sorted_accepts[lo];
        if span > 0 {
            return ((hi - lo) as u64 * batch) as f64 * 1e6 / span as f64;
        }
    }
    let last = sorted_accepts[n - 1].max(1);
    (n as u64 * batch) as f64 * 1e6 / last as f64
}

fn safety_report(nodes: &[Node], config: &SystemConfig, crypto: &Crypto, c: &Counters) -> SafetyReport {
    let mut report = SafetyReport {
        conflict_notes: c.conflicts,
        divergence_notes: c.divergences,
        client_conflicts: c.client_conflicts,
        ..Default::default()
    };
    let healthy: Vec<&Node> = nodes.iter().filter(|n| !n.faulty).collect();
    let mut reference: Vec<(Vec<u8>, ReplicaId)> = Vec::new();
    for node in &healthy {
        let id = node.replica.id();
        for (height, block) in node.replica.ledger().blocks().iter().enumerate() {
            let bytes = block.chain_bytes();
            match reference.get(height) {
                Some((expected, owner)) => {
                    if *expected != bytes {
                        report.divergent_heights.push((height as u64 + 1, *owner, id));
                    }
                }
                None => reference.push((bytes, id)),
            }
        }
        if let Err(e) = verify_ledger(node.replica.ledger().blocks(), config, crypto) {
            report.ledger_rejections.push((id, format!("{e:?}")));
        }
    }
    report
}

/// Runs one scenario to completion or to its time cap.
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput, ScenarioError> {
    Ok(Sim::new(scenario, options)?.run())
}

/// Number of rounds the fastest non-faulty replica executed.
pub fn max_round(output: &RunOutput) -> Round {
    output
        .non_faulty()
        .map(|r| r.replica.executed_round())
        .max()
        .unwrap_or(Round(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throughput_window() {
        assert_eq!(throughput_tps(&[], 10), 0.0);
        assert_eq!(throughput_tps(&[500_000, 1_000_000], 10), 20.0);
        // Middle window spans accepts 2..=17, one per 1000 us.
        let accepts: Vec<SimTime> = (1..=20).map(|i| i * 1000).collect();
        assert_eq!(throughput_tps(&accepts, 1), 15.0 * 1e6 / 15_000.0);
    }

    #[test]
    fn event_order_is_time_then_sequence() {
        let mut heap = BinaryHeap::new();
        for (time, seq) in [(5, 2), (3, 9), (5, 1), (3, 4)] {
            heap.push(Event {
                time,
                seq,
                kind: EventKind::CpuFree(0),
            });
        }
        let order: Vec<(u64, u64)> = std::iter::from_fn(|| heap.pop().map(|e| (e.time, e.seq))).collect();
        assert_eq!(order, vec![(3, 4), (3, 9), (5, 1), (5, 2)]);
    }
}

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use geobft_core::crypto::Principal;
use geobft_core::messages::{Envelope, Message, MessageKind};
use geobft_core::ordering::verify_ledger;
use geobft_core::replica::{Effect, Input, Note, Replica, TimerKey};
use geobft_core::testing::Fixture;
use geobft_core::types::{ClusterId, ReplicaId, SimTime};

/// Zero-latency FIFO network; timers fire only when no message is in flight.
struct Net {
    fx: Fixture,
    replicas: BTreeMap<ReplicaId, Replica>,
    inflight: VecDeque<Envelope>,
    timers: BTreeMap<(ReplicaId, TimerKey), SimTime>,
    now: SimTime,
    sent: BTreeMap<MessageKind, u64>,
    notes: Vec<(ReplicaId, Note)>,
    responses: u64,
    /// Replica that drops everything it sends.
    mute: Option<ReplicaId>,
}

impl Net {
    fn new(z: u16, n: u16, f: u16) -> Self {
        let fx = Fixture::new(z, n, f);
        let replicas = fx
            .config
            .replicas()
            .map(|id| {
                let r = Replica::new(id, fx.config.clone(), fx.crypto.clone(), fx.key(id).clone());
                (id, r)
            })
            .collect();
        Net {
            fx,
            replicas,
            inflight: VecDeque::new(),
            timers: BTreeMap::new(),
            now: 0,
            sent: BTreeMap::new(),
            notes: Vec::new(),
            responses: 0,
            mute: None,
        }
    }

    fn submit(&mut self, cluster: u16, seq: u64, to: ReplicaId) {
        let request = self.fx.request(cluster, seq);
        self.inflight.push_back(Envelope {
            from: Principal::Client(Fixture::client_id(ClusterId(cluster))),
            to: Principal::Replica(to),
            message: Arc::new(Message::Request(request)),
            tag: None,
        });
    }

    fn apply(&mut self, id: ReplicaId, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::Send(env) => {
                    if self.mute == Some(id) {
                        continue;
                    }
                    *self.sent.entry(env.message.kind()).or_default() += 1;
                    match env.to {
                        Principal::Replica(_) => self.inflight.push_back(env),
                        Principal::Client(_) => self.responses += 1,
                    }
                }
                Effect::SetTimer { key, after } => {
                    self.timers.insert((id, key), self.now + after);
                }
                Effect::CancelTimer(key) => {
                    self.timers.remove(&(id, key));
                }
                Effect::Note(note) => self.notes.push((id, note)),
            }
        }
    }

    fn run(&mut self, max_steps: usize) {
        for _ in 0..max_steps {
            if let Some(env) = self.inflight.pop_front() {
                let Principal::Replica(to) = env.to else { continue };
                let effects = self
                    .replicas
                    .get_mut(&to)
                    .unwrap()
                    .handle(Input::Deliver(env), self.now);
                self.apply(to, effects);
                continue;
            }
            let Some((&(id, key), &at)) = self.timers.iter().min_by_key(|(k, t)| (**t, **k)) else {
                return;
            };
            self.timers.remove(&(id, key));
            self.now = self.now.max(at);
            let effects = self.replicas.get_mut(&id).unwrap().handle(Input::Timer(key), self.now);
            self.apply(id, effects);
        }
        panic!("network did not quiesce");
    }
}

#[test]
fn single_cluster_round_costs_24_local_messages() {
    let mut net = Net::new(1, 4, 1);
    net.submit(1, 1, ReplicaId::new(1, 1));
    net.run(10_000);
    let local: u64 = [MessageKind::PrePrepare, MessageKind::Prepare, MessageKind::Commit]
        .iter()
        .map(|k| net.sent.get(k).copied().unwrap_or(0))
        .sum();
    assert_eq!(local, 24);
    for r in net.replicas.values() {
        assert_eq!(r.ledger().len(), 1);
    }
    assert_eq!(net.responses, 4);
}

#[test]
fn two_clusters_execute_identical_ledgers() {
    let mut net = Net::new(2, 4, 1);
    for seq in 1..=5 {
        net.submit(1, seq, ReplicaId::new(1, 1));
        net.submit(2, seq, ReplicaId::new(2, 1));
    }
    net.run(100_000);
    let reference = net.replicas[&ReplicaId::new(1, 1)].ledger();
    assert_eq!(reference.len(), 10);
    let chain: Vec<Vec<u8>> = reference.blocks().iter().map(|b| b.chain_bytes()).collect();
    for r in net.replicas.values() {
        let other: Vec<Vec<u8>> = r.ledger().blocks().iter().map(|b| b.chain_bytes()).collect();
        assert_eq!(other, chain);
        assert!(verify_ledger(r.ledger().blocks(), &net.fx.config, &net.fx.crypto).is_ok());
    }
    assert_eq!(net.sent[&MessageKind::GlobalShare], 5 * 2 * (2 + 2 * 3));
}

#[test]
fn idle_cluster_fills_rounds_with_noops() {
    let mut net = Net::new(2, 4, 1);
    for seq in 1..=3 {
        net.submit(1, seq, ReplicaId::new(1, 1));
    }
    net.run(100_000);
    for r in net.replicas.values() {
        assert_eq!(r.ledger().len(), 6);
        assert!(r
            .ledger()
            .blocks()
            .iter()
            .filter(|b| b.cluster == ClusterId(2))
            .all(|b| b.request.is_noop()));
    }
}

#[test]
fn mute_primary_is_replaced() {
    let mut net = Net::new(2, 4, 1);
    net.mute = Some(ReplicaId::new(1, 1));
    // Cluster 1's primary is mute, so its clients' requests must reach backups.
    for seq in 1..=2 {
        for local in 1..=4 {
            net.submit(1, seq, ReplicaId::new(1, local));
        }
        net.submit(2, seq, ReplicaId::new(2, 1));
    }
    net.run(200_000);
    for (id, r) in &net.replicas {
        if *id != ReplicaId::new(1, 1) {
            assert_eq!(r.ledger().len(), 4, "{id:?}");
        }
    }
    assert!(net
        .notes
        .iter()
        .any(|(id, n)| id.cluster == ClusterId(1) && matches!(n, Note::ViewChangeCompleted { .. })));
}

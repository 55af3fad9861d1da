//! Remote view-change: detecting a cluster that fails to share, agreeing on
//! it locally (DRVC) and asking that cluster to replace its primary (RVC).
//!
//! Counters:
//! - `v[target]` numbers this replica's detections of `target`; it only grows.
//! - `honored[requester]` is one past the highest RVC counter honored for a
//!   requesting cluster. Requests with a lower counter are replays.
//! - `backoff[target]` is the timer exponent for `target`; it grows on every
//!   expiry or join and never resets.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{Crypto, KeyPair, Principal};
use crate::messages::{DrvcMessage, RvcMessage};
use crate::types::{commit_quorum, weak_quorum, ClusterId, ReplicaId, Round, SimTime, SystemConfig};

/// Largest timer exponent; keeps deadlines bounded.
pub const MAX_BACKOFF: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemoteTimer {
    pub target: ClusterId,
    pub round: Round,
    /// Delay from arming to expiry: `base_timeout * 2^exponent`.
    pub after: SimTime,
    pub exponent: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RemoteAction {
    Arm(RemoteTimer),
    Expired {
        target: ClusterId,
        round: Round,
    },
    BroadcastDrvc(DrvcMessage),
    /// Send our copy of `target`'s share for `round` to a local peer.
    ResendShare {
        to: ReplicaId,
        target: ClusterId,
        round: Round,
    },
    SendRvc(ReplicaId, RvcMessage),
    /// Rebroadcast a remote RVC to the local peers.
    ForwardRvc(RvcMessage),
    /// `f + 1` RVCs from `requester` were honored. `trigger` is false when a
    /// recent or running view-change absorbs the request.
    Honored {
        requester: ClusterId,
        round: Round,
        v: u64,
        trigger: bool,
    },
    Replayed {
        requester: ClusterId,
        round: Round,
        v: u64,
    },
}

#[derive(Clone, Debug)]
pub struct RemoteVcState {
    me: ReplicaId,
    n: u16,
    f: u16,
    base_timeout: SimTime,
    v: BTreeMap<ClusterId, u64>,
    backoff: BTreeMap<ClusterId, u32>,
    armed: BTreeSet<(ClusterId, Round)>,
    drvc_votes: BTreeMap<(ClusterId, Round, u64), BTreeSet<u16>>,
    drvc_sent: BTreeSet<(ClusterId, Round, u64)>,
    rvc_sent: BTreeSet<(ClusterId, Round, u64)>,
    rvc_seen: BTreeSet<(ReplicaId, Round, u64)>,
    rvc_votes: BTreeMap<(ClusterId, Round, u64), BTreeSet<ReplicaId>>,
    rvc_done: BTreeSet<(ClusterId, Round, u64)>,
    honored: BTreeMap<ClusterId, u64>,
    triggered: BTreeMap<ClusterId, u64>,
}

impl RemoteVcState {
    pub fn new(me: ReplicaId, config: &SystemConfig) -> Self {
        RemoteVcState {
            me,
            n: config.n,
            f: config.f,
            base_timeout: config.base_timeout_us(),
            v: BTreeMap::new(),
            backoff: BTreeMap::new(),
            armed: BTreeSet::new(),
            drvc_votes: BTreeMap::new(),
            drvc_sent: BTreeSet::new(),
            rvc_sent: BTreeSet::new(),
            rvc_seen: BTreeSet::new(),
            rvc_votes: BTreeMap::new(),
            rvc_done: BTreeSet::new(),
            honored: BTreeMap::new(),
            triggered: BTreeMap::new(),
        }
    }

    fn shape(&self) -> SystemConfig {
        SystemConfig::with_shape(1, self.n, self.f).expect("validated shape")
    }

    pub fn counter(&self, target: ClusterId) -> u64 {
        self.v.get(&target).copied().unwrap_or(0)
    }

    pub fn honored(&self, requester: ClusterId) -> u64 {
        self.honored.get(&requester).copied().unwrap_or(0)
    }

    /// View-changes triggered by each requesting cluster.
    pub fn triggered(&self) -> &BTreeMap<ClusterId, u64> {
        &self.triggered
    }

    pub fn is_armed(&self, target: ClusterId, round: Round) -> bool {
        self.armed.contains(&(target, round))
    }

    fn timer(&self, target: ClusterId, round: Round) -> RemoteTimer {
        let exponent = self.backoff.get(&target).copied().unwrap_or(0);
        RemoteTimer {
            target,
            round,
            after: self.base_timeout << exponent,
            exponent,
        }
    }

    fn bump_backoff(&mut self, target: ClusterId) {
        let e = self.backoff.entry(target).or_insert(0);
        *e = (*e + 1).min(MAX_BACKOFF);
    }

    /// Starts waiting for `target`'s share of `round`.
    pub fn arm(&mut self, target: ClusterId, round: Round) -> Option<RemoteAction> {
        if target == self.me.cluster || !self.armed.insert((target, round)) {
            return None;
        }
        Some(RemoteAction::Arm(self.timer(target, round)))
    }

    /// The share arrived; returns whether a timer was pending.
    pub fn cancel(&mut self, target: ClusterId, round: Round) -> bool {
        self.armed.remove(&(target, round))
    }

    pub fn on_timer_expiry(&mut self, target: ClusterId, round: Round, has_share: bool) -> Vec<RemoteAction> {
        if !self.armed.contains(&(target, round)) {
            return Vec::new();
        }
        if has_share {
            self.armed.remove(&(target, round));
            return Vec::new();
        }
        let v = self.counter(target);
        self.v.insert(target, v + 1);
        self.bump_backoff(target);
        let mut out = vec![RemoteAction::Expired { target, round }];
        out.extend(self.send_drvc(target, round, v));
        out.push(RemoteAction::Arm(self.timer(target, round)));
        out
    }

    fn send_drvc(&mut self, target: ClusterId, round: Round, v: u64) -> Vec<RemoteAction> {
        if !self.drvc_sent.insert((target, round, v)) {
            return Vec::new();
        }
        self.drvc_votes
            .entry((target, round, v))
            .or_default()
            .insert(self.me.local);
        vec![RemoteAction::BroadcastDrvc(DrvcMessage {
            target,
            round,
            v,
            sender: self.me,
        })]
    }

    /// A local peer reports that `msg.target` failed to share `msg.round`.
    pub fn on_drvc(
        &mut self,
        from: ReplicaId,
        msg: &DrvcMessage,
        has_share: bool,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<RemoteAction> {
        if msg.sender != from || from.cluster != self.me.cluster || from == self.me || msg.target == self.me.cluster {
            return Vec::new();
        }
        if has_share {
            return vec![RemoteAction::ResendShare {
                to: from,
                target: msg.target,
                round: msg.round,
            }];
        }
        let key = (msg.target, msg.round, msg.v);
        if !self.drvc_votes.entry(key).or_default().insert(from.local) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let votes = self.drvc_votes[&key].len();
        let shape = self.shape();
        if votes >= weak_quorum(&shape) && msg.v >= self.counter(msg.target) && !self.drvc_sent.contains(&key) {
            self.v.insert(msg.target, msg.v + 1);
            self.bump_backoff(msg.target);
            out.extend(self.send_drvc(msg.target, msg.round, msg.v));
            self.armed.insert((msg.target, msg.round));
            out.push(RemoteAction::Arm(self.timer(msg.target, msg.round)));
        }
        out.extend(self.maybe_send_rvc(msg.target, msg.round, msg.v, crypto, keys));
        out
    }

    fn maybe_send_rvc(
        &mut self,
        target: ClusterId,
        round: Round,
        v: u64,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<RemoteAction> {
        let key = (target, round, v);
        let votes = self.drvc_votes.get(&key).map_or(0, BTreeSet::len);
        if votes < commit_quorum(&self.shape()) || !self.drvc_sent.contains(&key) || !self.rvc_sent.insert(key) {
            return Vec::new();
        }
        let bytes = RvcMessage::signing_bytes(target, round, v, self.me);
        let rvc = RvcMessage {
            target,
            round,
            v,
            sender: self.me,
            signature: crypto.sign(keys, &bytes),
        };
        let to = ReplicaId {
            cluster: target,
            local: self.me.local,
        };
        vec![RemoteAction::SendRvc(to, rvc)]
    }

    /// An RVC addressed to this cluster, directly from a remote replica or
    /// forwarded by a local peer. `busy` means a local view-change is running
    /// or completed recently.
    pub fn on_rvc(&mut self, from: ReplicaId, msg: &RvcMessage, busy: bool, crypto: &Crypto) -> Vec<RemoteAction> {
        let requester = msg.sender.cluster;
        if msg.target != self.me.cluster || requester == self.me.cluster {
            return Vec::new();
        }
        let direct = from == msg.sender;
        if !direct && from.cluster != self.me.cluster {
            return Vec::new();
        }
        if !self.rvc_seen.insert((msg.sender, msg.round, msg.v)) {
            return Vec::new();
        }
        let bytes = RvcMessage::signing_bytes(msg.target, msg.round, msg.v, msg.sender);
        if !crypto.verify(Principal::Replica(msg.sender), &bytes, &msg.signature) {
            self.rvc_seen.remove(&(msg.sender, msg.round, msg.v));
            return Vec::new();
        }
        let mut out = Vec::new();
        if direct {
            out.push(RemoteAction::ForwardRvc(msg.clone()));
        }
        let key = (requester, msg.round, msg.v);
        let votes = self.rvc_votes.entry(key).or_default();
        votes.insert(msg.sender);
        if votes.len() < weak_quorum(&self.shape()) || !self.rvc_done.insert(key) {
            return out;
        }
        if msg.v < self.honored(requester) {
            out.push(RemoteAction::Replayed {
                requester,
                round: msg.round,
                v: msg.v,
            });
            return out;
        }
        self.honored.insert(requester, msg.v + 1);
        if !busy {
            *self.triggered.entry(requester).or_default() += 1;
        }
        out.push(RemoteAction::Honored {
            requester,
            round: msg.round,
            v: msg.v,
            trigger: !busy,
        });
        out
    }
}

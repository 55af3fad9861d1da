//! A complete replica as a sans-IO state machine.
//!
//! The driver feeds [`Input`]s and carries out the returned [`Effect`]s:
//! sending envelopes, (re)arming and cancelling timers. [`Note`]s report
//! protocol events for tracing and metrics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::codec::Canonical;
use crate::crypto::{AuthClass, Crypto, Digest, KeyPair, Principal};
use crate::global_sharing::{select_targets, GlobalSharing, ShareOutcome};
use crate::local_replication::{CommitCertificate, LocalAction, Mode, PbftLog, Suspicion};
use crate::messages::{ClientResponse, DrvcMessage, Envelope, GlobalShareMessage, Message, RemoteRequest, RvcMessage};
use crate::ordering::{noop_rounds, try_execute, ExecutionState, Insert, Ledger, RoundBuffers};
use crate::remote_viewchange::{RemoteAction, RemoteVcState, MAX_BACKOFF};
use crate::types::{ClientId, ClientRequest, ClusterId, ReplicaId, RequestAuth, Round, SimTime, SystemConfig, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerKey {
    /// A backup waits for forwarded client requests to execute.
    Progress,
    ViewChange(View),
    Remote {
        target: ClusterId,
        round: Round,
    },
}

#[derive(Clone, Debug)]
pub enum Input {
    Deliver(Envelope),
    Timer(TimerKey),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Note {
    Proposed {
        round: Round,
        noop: bool,
    },
    Certified {
        round: Round,
        view: View,
    },
    Executed {
        round: Round,
        txns: u64,
    },
    Shared {
        round: Round,
        sends: usize,
    },
    ShareBuffered {
        origin: ClusterId,
        round: Round,
    },
    ShareRejected {
        origin: ClusterId,
        round: Round,
    },
    RemoteTimerExpired {
        target: ClusterId,
        round: Round,
    },
    DrvcSent {
        target: ClusterId,
        round: Round,
        v: u64,
    },
    RvcSent {
        target: ClusterId,
        round: Round,
        v: u64,
    },
    RvcHonored {
        requester: ClusterId,
        round: Round,
        v: u64,
        triggered: bool,
    },
    RvcReplayed {
        requester: ClusterId,
        round: Round,
        v: u64,
    },
    ViewChangeStarted {
        view: View,
        reason: Suspicion,
    },
    ViewChangeCompleted {
        view: View,
    },
    StableCheckpoint(Round),
    /// Checkpoint digests disagree; the replica halts.
    Divergence(Round),
    /// A second request for a filled round slot.
    SafetyConflict {
        cluster: ClusterId,
        round: Round,
    },
    BadAuth,
}

#[derive(Clone, Debug)]
pub enum Effect {
    Send(Envelope),
    /// Arms `key`, replacing any pending timer with the same key.
    SetTimer {
        key: TimerKey,
        after: SimTime,
    },
    CancelTimer(TimerKey),
    Note(Note),
}

pub struct Replica {
    me: ReplicaId,
    config: SystemConfig,
    crypto: Crypto,
    keys: KeyPair,
    pbft: PbftLog,
    sharing: GlobalSharing,
    remote: RemoteVcState,
    buffers: RoundBuffers,
    ledger: Ledger,
    state: ExecutionState,
    /// Requests waiting for a proposal slot (primary role).
    queue: VecDeque<ClientRequest>,
    queued: BTreeSet<(ClientId, u64)>,
    /// Requests this replica saw from clients and expects to execute.
    pending: BTreeMap<(ClientId, u64), ClientRequest>,
    /// Own-cluster requests certified but not yet executed.
    certified: BTreeSet<(ClientId, u64)>,
    progressed: bool,
    progress_armed: bool,
    progress_backoff: u32,
    replies: BTreeMap<ClientId, ClientResponse>,
    pending_remote: BTreeSet<RemoteRequest>,
    last_view_change: Option<SimTime>,
    halted: bool,
    now: SimTime,
}

impl Replica {
    pub fn new(me: ReplicaId, config: SystemConfig, crypto: Crypto, keys: KeyPair) -> Self {
        Replica {
            me,
            pbft: PbftLog::new(me, config.clone()),
            remote: RemoteVcState::new(me, &config),
            config,
            crypto,
            keys,
            sharing: GlobalSharing::default(),
            buffers: RoundBuffers::default(),
            ledger: Ledger::default(),
            state: ExecutionState::default(),
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
            pending: BTreeMap::new(),
            certified: BTreeSet::new(),
            progressed: false,
            progress_armed: false,
            progress_backoff: 0,
            replies: BTreeMap::new(),
            pending_remote: BTreeSet::new(),
            last_view_change: None,
            halted: false,
            now: 0,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.me
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn crypto(&self) -> &Crypto {
        &self.crypto
    }

    pub fn pbft(&self) -> &PbftLog {
        &self.pbft
    }

    pub fn remote(&self) -> &RemoteVcState {
        &self.remote
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn state(&self) -> &ExecutionState {
        &self.state
    }

    pub fn buffers(&self) -> &RoundBuffers {
        &self.buffers
    }

    pub fn sharing(&self) -> &GlobalSharing {
        &self.sharing
    }

    pub fn view(&self) -> View {
        self.pbft.view()
    }

    pub fn executed_round(&self) -> Round {
        self.buffers.executed()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn handle(&mut self, input: Input, now: SimTime) -> Vec<Effect> {
        self.now = now;
        let mut out = Vec::new();
        if self.halted {
            return out;
        }
        match input {
            Input::Deliver(env) => self.deliver(env, &mut out),
            Input::Timer(key) => self.timer(key, &mut out),
        }
        if !self.halted {
            self.drive(&mut out);
        }
        out
    }

    fn base_timeout(&self) -> SimTime {
        self.config.base_timeout_us()
    }

    fn envelope(&self, to: Principal, message: Arc<Message>, encoded: Option<&[u8]>) -> Envelope {
        let from = Principal::Replica(self.me);
        let tag = match message.auth_class() {
            AuthClass::Signature => None,
            AuthClass::Mac => {
                let owned;
                let bytes = match encoded {
                    Some(b) => b,
                    None => {
                        owned = message.to_canonical();
                        &owned
                    }
                };
                self.crypto.mac(from, to, &Envelope::mac_input(from, to, bytes)).ok()
            }
        };
        Envelope { from, to, message, tag }
    }

    fn send(&self, to: ReplicaId, message: Message, out: &mut Vec<Effect>) {
        out.push(Effect::Send(self.envelope(
            Principal::Replica(to),
            Arc::new(message),
            None,
        )));
    }

    fn send_many(&self, targets: impl IntoIterator<Item = ReplicaId>, message: Message, out: &mut Vec<Effect>) {
        let message = Arc::new(message);
        let encoded = (message.auth_class() == AuthClass::Mac).then(|| message.to_canonical());
        for to in targets {
            out.push(Effect::Send(self.envelope(
                Principal::Replica(to),
                message.clone(),
                encoded.as_deref(),
            )));
        }
    }

    fn peers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.config
            .cluster_members(self.me.cluster)
            .filter(move |r| *r != self.me)
    }

    fn broadcast(&self, message: Message, out: &mut Vec<Effect>) {
        self.send_many(self.peers().collect::<Vec<_>>(), message, out);
    }

    fn authentic(&self, env: &Envelope) -> bool {
        if env.to != Principal::Replica(self.me) {
            return false;
        }
        match env.message.auth_class() {
            AuthClass::Signature => true,
            AuthClass::Mac => match &env.tag {
                Some(tag) => {
                    let input = Envelope::mac_input(env.from, env.to, &env.message.to_canonical());
                    self.crypto.mac_verify(env.from, env.to, &input, tag)
                }
                None => false,
            },
        }
    }

    fn deliver(&mut self, env: Envelope, out: &mut Vec<Effect>) {
        if !self.authentic(&env) {
            out.push(Effect::Note(Note::BadAuth));
            return;
        }
        let from = match env.from {
            Principal::Client(_) => {
                if let Message::Request(req) = env.message.as_ref() {
                    self.on_request(None, req, out);
                }
                return;
            }
            Principal::Replica(id) => id,
        };
        match env.message.as_ref() {
            Message::Request(req) => self.on_request(Some(from), req, out),
            m @ (Message::PrePrepare(_)
            | Message::Prepare(_)
            | Message::Commit(_)
            | Message::Checkpoint(_)
            | Message::ViewChange(_)
            | Message::NewView(_)) => {
                let actions = self.pbft.handle(from, m, &self.crypto, &self.keys);
                self.apply_local(actions, out);
            }
            Message::GlobalShare(share) => self.on_share(from, share, out),
            Message::Drvc(m) => self.on_drvc(from, m, out),
            Message::Rvc(m) => self.on_rvc(from, m, out),
            Message::Response(_) => {}
        }
    }

    fn on_request(&mut self, via: Option<ReplicaId>, req: &ClientRequest, out: &mut Vec<Effect>) {
        if req.is_noop() || req.cluster != self.me.cluster {
            return;
        }
        if let Some(r) = via {
            if r.cluster != self.me.cluster {
                return;
            }
        }
        let key = (req.client, req.seq);
        if self.state.last_seq(&req.client).is_some_and(|s| s >= req.seq) {
            if via.is_none() {
                if let Some(resp) = self.replies.get(&req.client).filter(|r| r.seq == req.seq) {
                    let env = self.envelope(
                        Principal::Client(req.client),
                        Arc::new(Message::Response(resp.clone())),
                        None,
                    );
                    out.push(Effect::Send(env));
                }
            }
            return;
        }
        if self.queued.contains(&key) || (via.is_none() && self.pending.contains_key(&key)) {
            return;
        }
        if self.certified.contains(&key) || !self.check_request(req) {
            return;
        }
        if self.pbft.is_primary() {
            self.queued.insert(key);
            self.queue.push_back(req.clone());
        } else if via.is_none() {
            self.pending.insert(key, req.clone());
            self.send(self.pbft.primary(), Message::Request(req.clone()), out);
            if !self.progress_armed {
                self.arm_progress(out);
            }
        }
    }

    fn check_request(&self, req: &ClientRequest) -> bool {
        match &req.auth {
            RequestAuth::Client(sig) => self
                .crypto
                .verify(Principal::Client(req.client), &req.signing_bytes(), sig),
            RequestAuth::Noop { .. } => false,
        }
    }

    fn arm_progress(&mut self, out: &mut Vec<Effect>) {
        self.progress_armed = true;
        out.push(Effect::SetTimer {
            key: TimerKey::Progress,
            after: self.base_timeout() << self.progress_backoff,
        });
    }

    fn held_digest(&self, cluster: ClusterId, round: Round) -> Option<Digest> {
        self.held_certificate(cluster, round)
            .map(CommitCertificate::request_digest)
    }

    fn held_certificate(&self, cluster: ClusterId, round: Round) -> Option<&CommitCertificate> {
        self.buffers
            .get(cluster, round)
            .or_else(|| self.ledger.certificate(cluster, round, self.config.z))
    }

    fn on_share(&mut self, from: ReplicaId, share: &GlobalShareMessage, out: &mut Vec<Effect>) {
        if self.config.z == 1 {
            return;
        }
        let (origin, round) = (share.origin_cluster(), share.round());
        let held = self.held_digest(origin, round);
        let outcome = self.sharing.handle_global(
            &self.config,
            &self.crypto,
            self.me,
            from,
            share,
            held,
            &mut self.buffers,
        );
        match outcome {
            ShareOutcome::Buffered { forward } => {
                self.send_many(forward, Message::GlobalShare(share.clone()), out);
                out.push(Effect::Note(Note::ShareBuffered { origin, round }));
                if self.remote.cancel(origin, round) {
                    out.push(Effect::CancelTimer(TimerKey::Remote { target: origin, round }));
                }
            }
            ShareOutcome::Duplicate { forward } => {
                self.send_many(forward, Message::GlobalShare(share.clone()), out);
            }
            ShareOutcome::Rejected(_) => {
                out.push(Effect::Note(Note::ShareRejected { origin, round }));
            }
            ShareOutcome::Conflict => {
                out.push(Effect::Note(Note::SafetyConflict { cluster: origin, round }));
            }
        }
    }

    fn on_drvc(&mut self, from: ReplicaId, msg: &DrvcMessage, out: &mut Vec<Effect>) {
        if self.config.z == 1 {
            return;
        }
        let has = self.held_certificate(msg.target, msg.round).is_some();
        let actions = self.remote.on_drvc(from, msg, has, &self.crypto, &self.keys);
        self.apply_remote(actions, out);
    }

    fn on_rvc(&mut self, from: ReplicaId, msg: &RvcMessage, out: &mut Vec<Effect>) {
        if self.config.z == 1 {
            return;
        }
        let busy = self.pbft.mode() != Mode::Normal
            || self
                .last_view_change
                .is_some_and(|t| self.now.saturating_sub(t) < 2 * self.base_timeout());
        let actions = self.remote.on_rvc(from, msg, busy, &self.crypto);
        self.apply_remote(actions, out);
    }

    fn timer(&mut self, key: TimerKey, out: &mut Vec<Effect>) {
        match key {
            TimerKey::Progress => {
                self.progress_armed = false;
                if self.pending.is_empty() {
                    return;
                }
                let actions = self.pbft.suspect(Suspicion::Timeout, &self.crypto);
                self.apply_local(actions, out);
                self.progress_backoff = (self.progress_backoff + 1).min(MAX_BACKOFF);
                self.arm_progress(out);
            }
            TimerKey::ViewChange(view) => {
                let actions = self.pbft.view_change_timeout(view, &self.crypto);
                self.apply_local(actions, out);
            }
            TimerKey::Remote { target, round } => {
                let has = self.held_certificate(target, round).is_some();
                let actions = self.remote.on_timer_expiry(target, round, has);
                self.apply_remote(actions, out);
            }
        }
    }

    fn apply_remote(&mut self, actions: Vec<RemoteAction>, out: &mut Vec<Effect>) {
        for action in actions {
            match action {
                RemoteAction::Arm(t) => out.push(Effect::SetTimer {
                    key: TimerKey::Remote {
                        target: t.target,
                        round: t.round,
                    },
                    after: t.after,
                }),
                RemoteAction::Expired { target, round } => {
                    out.push(Effect::Note(Note::RemoteTimerExpired { target, round }));
                }
                RemoteAction::BroadcastDrvc(m) => {
                    out.push(Effect::Note(Note::DrvcSent {
                        target: m.target,
                        round: m.round,
                        v: m.v,
                    }));
                    self.broadcast(Message::Drvc(m), out);
                }
                RemoteAction::ResendShare { to, target, round } => {
                    if let Some(cert) = self.held_certificate(target, round) {
                        let msg = Message::GlobalShare(GlobalShareMessage {
                            certificate: cert.clone(),
                        });
                        self.send(to, msg, out);
                    }
                }
                RemoteAction::SendRvc(to, m) => {
                    out.push(Effect::Note(Note::RvcSent {
                        target: m.target,
                        round: m.round,
                        v: m.v,
                    }));
                    self.send(to, Message::Rvc(m), out);
                }
                RemoteAction::ForwardRvc(m) => self.broadcast(Message::Rvc(m), out),
                RemoteAction::Honored {
                    requester,
                    round,
                    v,
                    trigger,
                } => {
                    out.push(Effect::Note(Note::RvcHonored {
                        requester,
                        round,
                        v,
                        triggered: trigger,
                    }));
                    let request = RemoteRequest { requester, round };
                    self.pbft.note_remote_request(request);
                    self.pending_remote.insert(request);
                    if trigger {
                        let actions = self.pbft.suspect(Suspicion::Remote, &self.crypto);
                        self.apply_local(actions, out);
                    } else if self.pbft.is_active_primary() {
                        self.reshare(request, out);
                    }
                }
                RemoteAction::Replayed { requester, round, v } => {
                    out.push(Effect::Note(Note::RvcReplayed { requester, round, v }));
                }
            }
        }
    }

    /// Sends our certificate for a remotely requested round to the requester.
    fn reshare(&mut self, request: RemoteRequest, out: &mut Vec<Effect>) {
        let own = self.me.cluster;
        let cert = self
            .pbft
            .certificate(request.round)
            .or_else(|| self.ledger.certificate(own, request.round, self.config.z))
            .cloned();
        let Some(cert) = cert else {
            return;
        };
        let Ok(targets) = select_targets(own, request.requester, &self.config) else {
            return;
        };
        let sends = targets.len();
        self.send_many(
            targets,
            Message::GlobalShare(GlobalShareMessage { certificate: cert }),
            out,
        );
        out.push(Effect::Note(Note::Shared {
            round: request.round,
            sends,
        }));
    }

    fn share(&mut self, cert: &CommitCertificate, out: &mut Vec<Effect>) {
        if self.config.z == 1 || !self.pbft.is_active_primary() || self.sharing.has_shared(cert.round) {
            return;
        }
        if let Ok(sends) = self.sharing.send_global(&self.config, cert) {
            let round = cert.round;
            let count = sends.len();
            let Some(first) = sends.first() else {
                return;
            };
            let message = Arc::new(first.1.clone());
            for (to, _) in sends {
                out.push(Effect::Send(self.envelope(
                    Principal::Replica(to),
                    message.clone(),
                    None,
                )));
            }
            out.push(Effect::Note(Note::Shared { round, sends: count }));
        }
    }

    fn apply_local(&mut self, actions: Vec<LocalAction>, out: &mut Vec<Effect>) {
        let mut work: VecDeque<LocalAction> = actions.into();
        while let Some(action) = work.pop_front() {
            match action {
                LocalAction::Broadcast(m) => self.broadcast(m, out),
                LocalAction::Send(to, m) => self.send(to, m, out),
                LocalAction::Certified { certificate, first } => {
                    self.on_certified(certificate, first, out);
                }
                LocalAction::ViewChangeStarted { view, attempt, reason } => {
                    out.push(Effect::Note(Note::ViewChangeStarted { view, reason }));
                    out.push(Effect::SetTimer {
                        key: TimerKey::ViewChange(view),
                        after: self.base_timeout() << attempt.min(MAX_BACKOFF),
                    });
                }
                LocalAction::ViewInstalled { view, remote_requests } => {
                    out.push(Effect::Note(Note::ViewChangeCompleted { view }));
                    out.push(Effect::CancelTimer(TimerKey::ViewChange(view)));
                    self.last_view_change = Some(self.now);
                    self.sharing.reset_shared();
                    self.pending_remote.extend(remote_requests);
                    work.extend(self.pbft.resume_after_install(&self.crypto, &self.keys));
                    self.after_install(out);
                }
                LocalAction::StableCheckpoint(round) => {
                    out.push(Effect::Note(Note::StableCheckpoint(round)));
                }
                LocalAction::Divergence(round) => {
                    out.push(Effect::Note(Note::Divergence(round)));
                    self.halted = true;
                    return;
                }
            }
        }
    }

    fn on_certified(&mut self, certificate: CommitCertificate, first: bool, out: &mut Vec<Effect>) {
        let round = certificate.round;
        out.push(Effect::Note(Note::Certified {
            round,
            view: certificate.view(),
        }));
        if !certificate.request.is_noop() {
            let key = (certificate.request.client, certificate.request.seq);
            self.certified.insert(key);
            self.progressed |= self.pending.remove(&key).is_some();
        }
        if first {
            match self.buffers.insert(certificate.clone()) {
                Insert::Conflict => out.push(Effect::Note(Note::SafetyConflict {
                    cluster: self.me.cluster,
                    round,
                })),
                Insert::New => {
                    for target in ClusterId::all(self.config.z) {
                        if target != self.me.cluster && self.held_certificate(target, round).is_none() {
                            if let Some(action) = self.remote.arm(target, round) {
                                self.apply_remote(vec![action], out);
                            }
                        }
                    }
                }
                Insert::Duplicate | Insert::Stale => {}
            }
        }
        self.share(&certificate, out);
    }

    fn after_install(&mut self, out: &mut Vec<Effect>) {
        if !self.pbft.is_primary() {
            // A former primary hands queued work back to clients' retries.
            self.queue.clear();
            self.queued.clear();
            if !self.pending.is_empty() {
                let primary = self.pbft.primary();
                let pending: Vec<ClientRequest> = self.pending.values().cloned().collect();
                for req in pending {
                    self.send(primary, Message::Request(req), out);
                }
                self.arm_progress(out);
            }
            return;
        }
        for (key, req) in std::mem::take(&mut self.pending) {
            if !self.certified.contains(&key) && self.queued.insert(key) {
                self.queue.push_back(req);
            }
        }
        let requests: Vec<RemoteRequest> = self.pending_remote.iter().copied().collect();
        for request in requests {
            if self.pbft.certificate(request.round).is_none() {
                self.reshare(request, out);
            }
        }
    }

    /// Executes what is complete, answers clients, checkpoints and proposes.
    fn drive(&mut self, out: &mut Vec<Effect>) {
        let executed = try_execute(&mut self.state, &mut self.ledger, &mut self.buffers, &self.config);
        for round in executed {
            self.pbft.set_executed(round.round);
            let mut txns = 0;
            for done in &round.requests {
                let req = &done.request;
                txns += req.transactions();
                if req.is_noop() {
                    continue;
                }
                let key = (req.client, req.seq);
                self.queued.remove(&key);
                self.certified.remove(&key);
                self.progressed |= self.pending.remove(&key).is_some();
                if req.cluster == self.me.cluster && done.applied {
                    let response = ClientResponse {
                        client: req.client,
                        seq: req.seq,
                        round: round.round,
                        result: done.result,
                        responder: self.me,
                        view: self.pbft.view(),
                    };
                    let env = self.envelope(
                        Principal::Client(req.client),
                        Arc::new(Message::Response(response.clone())),
                        None,
                    );
                    out.push(Effect::Send(env));
                    self.replies.insert(req.client, response);
                }
            }
            out.push(Effect::Note(Note::Executed {
                round: round.round,
                txns,
            }));
            if round.checkpoint {
                let actions = self
                    .pbft
                    .checkpoint(round.round, self.state.state_digest(), &self.crypto, &self.keys);
                self.apply_local(actions, out);
                if self.halted {
                    return;
                }
            }
            self.pending_remote.retain(|r| r.round > round.round);
        }
        if std::mem::take(&mut self.progressed) {
            self.progress_backoff = 0;
            if self.pending.is_empty() {
                self.progress_armed = false;
                out.push(Effect::CancelTimer(TimerKey::Progress));
            } else {
                self.arm_progress(out);
            }
        }
        self.propose(out);
    }

    fn propose(&mut self, out: &mut Vec<Effect>) {
        if !self.pbft.is_active_primary() {
            return;
        }
        let limit = Round(self.buffers.executed().0 + self.config.pipeline_window);
        while self.pbft.next_round() <= limit {
            let Some(req) = self.queue.pop_front() else {
                break;
            };
            if self.state.last_seq(&req.client).is_some_and(|s| s >= req.seq) {
                self.queued.remove(&(req.client, req.seq));
                continue;
            }
            let key = (req.client, req.seq);
            if self.certified.contains(&key)
                || self
                    .pbft
                    .in_flight()
                    .any(|r| r.client == req.client && r.seq == req.seq)
            {
                continue;
            }
            let round = self.pbft.next_round();
            match self.pbft.propose(round, req, &self.crypto) {
                Ok(actions) => {
                    out.push(Effect::Note(Note::Proposed { round, noop: false }));
                    self.apply_local(actions, out);
                }
                Err(_) => break,
            }
        }
        let demanded = self
            .buffers
            .max_foreign_round(self.me.cluster)
            .into_iter()
            .chain(self.pending_remote.iter().map(|r| r.round))
            .max();
        for round in noop_rounds(self.queue.is_empty(), self.pbft.next_round(), demanded, limit) {
            let noop = ClientRequest::noop(self.me.cluster, round);
            match self.pbft.propose(round, noop, &self.crypto) {
                Ok(actions) => {
                    out.push(Effect::Note(Note::Proposed { round, noop: true }));
                    self.apply_local(actions, out);
                }
                Err(_) => break,
            }
        }
    }
}

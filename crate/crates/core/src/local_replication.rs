//! Per-cluster PBFT: normal case, commit certificates, checkpoints and view-change.
//!
//! [`PbftLog`] is a sans-IO state machine. Handlers return [`LocalAction`]s that
//! the owning replica turns into envelopes and timers.
//!
//! A request is *prepared* once the replica holds the preprepare and prepares
//! from enough backups that, counting the primary's preprepare as its support,
//! `n - f` replicas back the same digest. The primary never sends a prepare.
//! A *certificate* is the request plus the `n - f` lowest-id matching COMMITs.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{Crypto, Digest, KeyPair, Principal};
use crate::messages::{
    Checkpoint, Commit, Message, NewView, PrePrepare, Prepare, PreparedProof, RemoteRequest, ViewChange,
};
use crate::types::{
    commit_quorum, weak_quorum, ClientRequest, ClusterId, ReplicaId, RequestAuth, Round, SystemConfig, View,
};

/// Proof that `origin_cluster` locally replicated `request` in `round`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitCertificate {
    pub origin_cluster: ClusterId,
    pub round: Round,
    pub request: ClientRequest,
    pub preprepare: PrePrepare,
    pub commits: Vec<Commit>,
}

impl CommitCertificate {
    pub fn request_digest(&self) -> Digest {
        self.preprepare.request_digest
    }

    pub fn view(&self) -> View {
        self.preprepare.view
    }
}

impl Canonical for CommitCertificate {
    fn encode(&self, enc: &mut Encoder) {
        enc.cluster(self.origin_cluster)
            .round(self.round)
            .put(&self.request)
            .put(&self.preprepare)
            .seq(&self.commits);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(CommitCertificate {
            origin_cluster: dec.cluster()?,
            round: dec.round()?,
            request: dec.get()?,
            preprepare: dec.get()?,
            commits: dec.seq()?,
        })
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum CertificateRejection {
    #[error("certificate must hold exactly n - f commits")]
    Count,
    #[error("two commits from the same signer")]
    DuplicateSigner,
    #[error("commit from a replica outside the origin cluster")]
    NotMember,
    #[error("request, preprepare and commits disagree")]
    DigestMismatch,
    #[error("commit signature does not verify")]
    BadSignature,
}

/// Checks that a request is well-formed for a slot of `cluster`: a client
/// request carries a valid client signature, a no-op names `round`.
pub fn request_is_valid(crypto: &Crypto, cluster: ClusterId, round: Round, request: &ClientRequest) -> bool {
    if request.cluster != cluster {
        return false;
    }
    match &request.auth {
        RequestAuth::Noop { round: r } => *r == round && request.payload.is_empty() && request.seq == 0,
        RequestAuth::Client(sig) => crypto.verify(Principal::Client(request.client), &request.signing_bytes(), sig),
    }
}

/// Structural checks shared by [`verify_certificate`]; no signatures are checked.
pub fn check_certificate_structure(
    config: &SystemConfig,
    cert: &CommitCertificate,
) -> Result<(), CertificateRejection> {
    if cert.commits.len() != commit_quorum(config) {
        return Err(CertificateRejection::Count);
    }
    let mut signers = BTreeSet::new();
    for commit in &cert.commits {
        if commit.sender.cluster != cert.origin_cluster || commit.sender.local == 0 || commit.sender.local > config.n {
            return Err(CertificateRejection::NotMember);
        }
        if !signers.insert(commit.sender) {
            return Err(CertificateRejection::DuplicateSigner);
        }
    }
    let pp = &cert.preprepare;
    let noop_ok = match cert.request.auth {
        RequestAuth::Noop { round } => round == cert.round,
        RequestAuth::Client(_) => true,
    };
    if pp.origin_cluster != cert.origin_cluster
        || pp.round != cert.round
        || pp.request != cert.request
        || cert.request.cluster != cert.origin_cluster
        || !noop_ok
        || cert.request.digest() != pp.request_digest
    {
        return Err(CertificateRejection::DigestMismatch);
    }
    if cert
        .commits
        .iter()
        .any(|c| c.view != pp.view || c.round != cert.round || c.request_digest != pp.request_digest)
    {
        return Err(CertificateRejection::DigestMismatch);
    }
    Ok(())
}

/// Accepts iff the certificate is well-formed and every commit signature verifies.
pub fn verify_certificate(
    config: &SystemConfig,
    crypto: &Crypto,
    cert: &CommitCertificate,
) -> Result<(), CertificateRejection> {
    check_certificate_structure(config, cert)?;
    crypto.note_request_hash();
    for commit in &cert.commits {
        let bytes = Commit::signing_bytes(commit.view, commit.round, &commit.request_digest, commit.sender);
        if !crypto.verify(Principal::Replica(commit.sender), &bytes, &commit.signature) {
            return Err(CertificateRejection::BadSignature);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Normal,
    /// Waiting for the NEWVIEW of the given view.
    ViewChanging(View),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suspicion {
    Timeout,
    Equivocation,
    Remote,
    BadNewView,
    Joined,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LocalAction {
    /// Send to every other replica of the cluster.
    Broadcast(Message),
    Send(ReplicaId, Message),
    /// A commit quorum formed for the slot. `first` is set the first time the
    /// round is ever certified at this replica.
    Certified {
        certificate: CommitCertificate,
        first: bool,
    },
    ViewChangeStarted {
        view: View,
        attempt: u32,
        reason: Suspicion,
    },
    ViewInstalled {
        view: View,
        remote_requests: Vec<RemoteRequest>,
    },
    StableCheckpoint(Round),
    /// A quorum certified a state digest different from ours.
    Divergence(Round),
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum ProposeError {
    #[error("only the primary of the current view may propose")]
    NotPrimary,
    #[error("round slot already holds a proposal")]
    SlotOccupied,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    preprepare: Option<PrePrepare>,
    /// Backups (local index) whose prepare matched the preprepare digest.
    prepares: BTreeSet<u16>,
    /// Prepares seen before the preprepare.
    early_prepares: BTreeMap<u16, Digest>,
    commits: BTreeMap<u16, Commit>,
    sent_commit: bool,
    certified_in_view: bool,
    prepared: Option<PreparedProof>,
    certificate: Option<CommitCertificate>,
}

impl Slot {
    fn reset_view_state(&mut self) {
        self.preprepare = None;
        self.prepares.clear();
        self.early_prepares.clear();
        self.commits.clear();
        self.sent_commit = false;
        self.certified_in_view = false;
    }
}

/// One replica's PBFT state for its own cluster.
#[derive(Debug)]
pub struct PbftLog {
    me: ReplicaId,
    config: SystemConfig,
    view: View,
    mode: Mode,
    attempts: u32,
    next_round: Round,
    slots: BTreeMap<Round, Slot>,
    stable: Round,
    executed: Round,
    checkpoint_votes: BTreeMap<Round, BTreeMap<u16, Digest>>,
    own_checkpoints: BTreeMap<Round, Digest>,
    view_changes: BTreeMap<View, BTreeMap<u16, ViewChange>>,
    pending_new_view: Option<(ReplicaId, NewView)>,
    new_view_sent: Option<View>,
    future: BTreeMap<View, Vec<(ReplicaId, Message)>>,
    remote_requests: BTreeSet<RemoteRequest>,
    conflicts: u64,
}

impl PbftLog {
    pub fn new(me: ReplicaId, config: SystemConfig) -> Self {
        PbftLog {
            me,
            config,
            view: View(0),
            mode: Mode::Normal,
            attempts: 0,
            next_round: Round(1),
            slots: BTreeMap::new(),
            stable: Round::GENESIS,
            executed: Round::GENESIS,
            checkpoint_votes: BTreeMap::new(),
            own_checkpoints: BTreeMap::new(),
            view_changes: BTreeMap::new(),
            pending_new_view: None,
            new_view_sent: None,
            future: BTreeMap::new(),
            remote_requests: BTreeSet::new(),
            conflicts: 0,
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn primary(&self) -> ReplicaId {
        ReplicaId {
            cluster: self.me.cluster,
            local: self.view.primary_local(self.config.n),
        }
    }

    pub fn is_primary(&self) -> bool {
        self.primary() == self.me
    }

    /// True when this replica is the primary and not in a view change.
    pub fn is_active_primary(&self) -> bool {
        self.is_primary() && self.mode == Mode::Normal
    }

    pub fn next_round(&self) -> Round {
        self.next_round
    }

    pub fn stable_checkpoint(&self) -> Round {
        self.stable
    }

    /// Conflicting preprepares observed.
    pub fn conflicts(&self) -> u64 {
        self.conflicts
    }

    pub fn certificate(&self, round: Round) -> Option<&CommitCertificate> {
        self.slots.get(&round).and_then(|s| s.certificate.as_ref())
    }

    /// Requests in slots that hold a preprepare but no certificate yet.
    pub fn in_flight(&self) -> impl Iterator<Item = &ClientRequest> {
        self.slots
            .values()
            .filter(|s| s.certificate.is_none())
            .filter_map(|s| s.preprepare.as_ref().map(|pp| &pp.request))
    }

    pub fn note_remote_request(&mut self, request: RemoteRequest) {
        self.remote_requests.insert(request);
    }

    fn quorum(&self) -> usize {
        commit_quorum(&self.config)
    }

    fn effective_view(&self) -> View {
        match self.mode {
            Mode::Normal => self.view,
            Mode::ViewChanging(target) => target,
        }
    }

    fn primary_of(&self, view: View) -> ReplicaId {
        ReplicaId {
            cluster: self.me.cluster,
            local: view.primary_local(self.config.n),
        }
    }

    fn is_peer(&self, id: ReplicaId) -> bool {
        id.cluster == self.me.cluster && id.local >= 1 && id.local <= self.config.n && id != self.me
    }

    /// Starts replication of `request` in `round`.
    pub fn propose(
        &mut self,
        round: Round,
        request: ClientRequest,
        crypto: &Crypto,
    ) -> Result<Vec<LocalAction>, ProposeError> {
        if !self.is_active_primary() {
            return Err(ProposeError::NotPrimary);
        }
        if round < self.next_round || round <= self.stable {
            return Err(ProposeError::SlotOccupied);
        }
        let slot = self.slots.entry(round).or_default();
        if slot.preprepare.is_some() {
            return Err(ProposeError::SlotOccupied);
        }
        crypto.note_request_hash();
        let pp = PrePrepare {
            view: self.view,
            round,
            origin_cluster: self.me.cluster,
            request_digest: request.digest(),
            request,
        };
        slot.preprepare = Some(pp.clone());
        self.next_round = round.next();
        Ok(vec![LocalAction::Broadcast(Message::PrePrepare(pp))])
    }

    /// Dispatches a local PBFT message. `from` is the authenticated sender.
    pub fn handle(&mut self, from: ReplicaId, msg: &Message, crypto: &Crypto, keys: &KeyPair) -> Vec<LocalAction> {
        if !self.is_peer(from) {
            return Vec::new();
        }
        match msg {
            Message::PrePrepare(pp) => self.handle_preprepare(from, pp, crypto, keys),
            Message::Prepare(p) => self.handle_prepare(from, p, crypto, keys),
            Message::Commit(c) => self.handle_commit(from, c, crypto),
            Message::Checkpoint(cp) => self.handle_checkpoint(from, cp, crypto),
            Message::ViewChange(vc) => self.handle_view_change(from, vc, crypto, keys),
            Message::NewView(nv) => self.handle_new_view(from, nv, crypto, keys),
            _ => Vec::new(),
        }
    }

    /// Defers messages of a future view; returns false for stale or deferred ones.
    fn admit(&mut self, from: ReplicaId, view: View, msg: impl FnOnce() -> Message) -> bool {
        if view < self.view {
            return false;
        }
        if view > self.view || self.mode != Mode::Normal {
            if view >= self.view {
                self.future.entry(view).or_default().push((from, msg()));
            }
            return false;
        }
        true
    }

    pub fn handle_preprepare(
        &mut self,
        from: ReplicaId,
        pp: &PrePrepare,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<LocalAction> {
        if from != self.primary_of(pp.view) || pp.origin_cluster != self.me.cluster {
            return Vec::new();
        }
        if !self.admit(from, pp.view, || Message::PrePrepare(pp.clone())) {
            return Vec::new();
        }
        self.accept_preprepare(pp, crypto, keys)
    }

    fn accept_preprepare(&mut self, pp: &PrePrepare, crypto: &Crypto, keys: &KeyPair) -> Vec<LocalAction> {
        if pp.round <= self.settled() {
            return Vec::new();
        }
        if let Some(existing) = self.slots.get(&pp.round).and_then(|s| s.preprepare.as_ref()) {
            if existing.request_digest == pp.request_digest {
                return Vec::new();
            }
            self.conflicts += 1;
            return self.start_view_change(self.view.next(), Suspicion::Equivocation, crypto);
        }
        crypto.note_request_hash();
        if pp.request.digest() != pp.request_digest || !request_is_valid(crypto, self.me.cluster, pp.round, &pp.request)
        {
            return Vec::new();
        }
        if let Some(cert) = self.slots.get(&pp.round).and_then(|s| s.certificate.as_ref()) {
            if cert.request_digest() != pp.request_digest {
                self.conflicts += 1;
                return self.start_view_change(self.view.next(), Suspicion::Equivocation, crypto);
            }
        }
        let me = self.me.local;
        let is_primary = self.is_primary();
        let slot = self.slots.entry(pp.round).or_default();
        slot.preprepare = Some(pp.clone());
        for (sender, digest) in std::mem::take(&mut slot.early_prepares) {
            if digest == pp.request_digest {
                slot.prepares.insert(sender);
            }
        }
        let mut out = Vec::new();
        if !is_primary {
            slot.prepares.insert(me);
            out.push(LocalAction::Broadcast(Message::Prepare(Prepare {
                view: pp.view,
                round: pp.round,
                request_digest: pp.request_digest,
                sender: self.me,
            })));
        }
        if pp.round >= self.next_round {
            self.next_round = pp.round.next();
        }
        out.extend(self.check_prepared(pp.round, crypto, keys));
        out.extend(self.check_committed(pp.round));
        out
    }

    pub fn handle_prepare(
        &mut self,
        from: ReplicaId,
        p: &Prepare,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<LocalAction> {
        if p.sender != from || from == self.primary_of(p.view) {
            return Vec::new();
        }
        if !self.admit(from, p.view, || Message::Prepare(p.clone())) || p.round <= self.settled() {
            return Vec::new();
        }
        let slot = self.slots.entry(p.round).or_default();
        match &slot.preprepare {
            Some(pp) if pp.request_digest == p.request_digest => {
                slot.prepares.insert(from.local);
            }
            Some(_) => return Vec::new(),
            None => {
                slot.early_prepares.entry(from.local).or_insert(p.request_digest);
                return Vec::new();
            }
        }
        self.check_prepared(p.round, crypto, keys)
    }

    fn check_prepared(&mut self, round: Round, crypto: &Crypto, keys: &KeyPair) -> Vec<LocalAction> {
        let quorum = self.quorum();
        let me = self.me;
        let slot = match self.slots.get_mut(&round) {
            Some(slot) => slot,
            None => return Vec::new(),
        };
        // The preprepare stands in for the primary's prepare.
        if slot.preprepare.is_none() || slot.sent_commit || slot.prepares.len() + 1 < quorum {
            return Vec::new();
        }
        let Some(pp) = slot.preprepare.clone() else {
            return Vec::new();
        };
        slot.prepared = Some(PreparedProof {
            preprepare: pp.clone(),
            prepare_senders: slot.prepares.iter().copied().collect(),
        });
        slot.sent_commit = true;
        let bytes = Commit::signing_bytes(pp.view, round, &pp.request_digest, me);
        let commit = Commit {
            view: pp.view,
            round,
            request_digest: pp.request_digest,
            sender: me,
            signature: crypto.sign(keys, &bytes),
        };
        slot.commits.insert(me.local, commit.clone());
        let mut out = vec![LocalAction::Broadcast(Message::Commit(commit))];
        out.extend(self.check_committed(round));
        out
    }

    pub fn handle_commit(&mut self, from: ReplicaId, c: &Commit, crypto: &Crypto) -> Vec<LocalAction> {
        if c.sender != from {
            return Vec::new();
        }
        if !self.admit(from, c.view, || Message::Commit(c.clone())) || c.round <= self.settled() {
            return Vec::new();
        }
        if self
            .slots
            .get(&c.round)
            .is_some_and(|s| s.commits.contains_key(&from.local))
        {
            return Vec::new();
        }
        let bytes = Commit::signing_bytes(c.view, c.round, &c.request_digest, c.sender);
        if !crypto.verify(Principal::Replica(from), &bytes, &c.signature) {
            return Vec::new();
        }
        self.slots
            .entry(c.round)
            .or_default()
            .commits
            .insert(from.local, c.clone());
        self.check_committed(c.round)
    }

    fn check_committed(&mut self, round: Round) -> Vec<LocalAction> {
        let quorum = self.quorum();
        let cluster = self.me.cluster;
        let Some(slot) = self.slots.get_mut(&round) else {
            return Vec::new();
        };
        let Some(pp) = &slot.preprepare else {
            return Vec::new();
        };
        if slot.certified_in_view {
            return Vec::new();
        }
        let matching: Vec<Commit> = slot
            .commits
            .values()
            .filter(|c| c.request_digest == pp.request_digest && c.view == pp.view)
            .take(quorum)
            .cloned()
            .collect();
        if matching.len() < quorum {
            return Vec::new();
        }
        let certificate = CommitCertificate {
            origin_cluster: cluster,
            round,
            request: pp.request.clone(),
            preprepare: pp.clone(),
            commits: matching,
        };
        slot.certified_in_view = true;
        let first = match &slot.certificate {
            None => {
                slot.certificate = Some(certificate.clone());
                true
            }
            Some(existing) => {
                assert_eq!(
                    existing.request_digest(),
                    certificate.request_digest(),
                    "two certificates for one round"
                );
                false
            }
        };
        vec![LocalAction::Certified { certificate, first }]
    }

    /// Installs a certificate learned out of band (from a view-change message).
    fn adopt_certificate(&mut self, cert: &CommitCertificate) -> Option<LocalAction> {
        if cert.round <= self.settled() {
            return None;
        }
        let slot = self.slots.entry(cert.round).or_default();
        if slot.certificate.is_some() {
            return None;
        }
        slot.certificate = Some(cert.clone());
        Some(LocalAction::Certified {
            certificate: cert.clone(),
            first: true,
        })
    }

    /// Records local execution progress and prunes what the stable checkpoint covers.
    pub fn set_executed(&mut self, round: Round) {
        self.executed = self.executed.max(round);
        self.prune();
    }

    /// Rounds both stable and executed here; nothing below is needed again.
    fn settled(&self) -> Round {
        self.stable.min(self.executed)
    }

    fn prune(&mut self) {
        self.slots = self.slots.split_off(&self.settled().next());
        self.checkpoint_votes = self.checkpoint_votes.split_off(&self.stable);
        self.own_checkpoints = self.own_checkpoints.split_off(&self.stable);
    }

    /// Signs and broadcasts our state digest after executing `round`.
    pub fn checkpoint(
        &mut self,
        round: Round,
        state_digest: Digest,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<LocalAction> {
        let bytes = Checkpoint::signing_bytes(round, &state_digest, self.me);
        let cp = Checkpoint {
            round,
            state_digest,
            sender: self.me,
            signature: crypto.sign(keys, &bytes),
        };
        self.own_checkpoints.insert(round, state_digest);
        self.checkpoint_votes
            .entry(round)
            .or_default()
            .insert(self.me.local, state_digest);
        let mut out = vec![LocalAction::Broadcast(Message::Checkpoint(cp))];
        out.extend(self.check_stable(round));
        out
    }

    pub fn handle_checkpoint(&mut self, from: ReplicaId, cp: &Checkpoint, crypto: &Crypto) -> Vec<LocalAction> {
        if cp.sender != from || cp.round <= self.stable {
            return Vec::new();
        }
        let bytes = Checkpoint::signing_bytes(cp.round, &cp.state_digest, cp.sender);
        if !crypto.verify(Principal::Replica(from), &bytes, &cp.signature) {
            return Vec::new();
        }
        self.checkpoint_votes
            .entry(cp.round)
            .or_default()
            .entry(from.local)
            .or_insert(cp.state_digest);
        self.check_stable(cp.round)
    }

    fn check_stable(&mut self, round: Round) -> Vec<LocalAction> {
        let Some(votes) = self.checkpoint_votes.get(&round) else {
            return Vec::new();
        };
        let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
        for d in votes.values() {
            *tally.entry(*d).or_default() += 1;
        }
        let Some((digest, _)) = tally.into_iter().find(|(_, count)| *count >= self.quorum()) else {
            return Vec::new();
        };
        if let Some(own) = self.own_checkpoints.get(&round) {
            if *own != digest {
                return vec![LocalAction::Divergence(round)];
            }
        }
        if round <= self.stable {
            return Vec::new();
        }
        self.stable = round;
        if self.next_round <= round {
            self.next_round = round.next();
        }
        self.prune();
        vec![LocalAction::StableCheckpoint(round)]
    }

    /// Suspects the current primary and moves towards the next view.
    /// A replica already changing views waits for that change's own timer.
    pub fn suspect(&mut self, reason: Suspicion, crypto: &Crypto) -> Vec<LocalAction> {
        if self.mode != Mode::Normal {
            return Vec::new();
        }
        self.start_view_change(self.effective_view().next(), reason, crypto)
    }

    /// Called when the timer of an unfinished view change to `view` fires.
    pub fn view_change_timeout(&mut self, view: View, crypto: &Crypto) -> Vec<LocalAction> {
        if self.mode != Mode::ViewChanging(view) {
            return Vec::new();
        }
        self.attempts += 1;
        self.start_view_change(view.next(), Suspicion::Timeout, crypto)
    }

    fn start_view_change(&mut self, target: View, reason: Suspicion, crypto: &Crypto) -> Vec<LocalAction> {
        if target <= self.effective_view() {
            return Vec::new();
        }
        self.mode = Mode::ViewChanging(target);
        let stable = self.stable;
        let mut certified = Vec::new();
        let mut prepared = Vec::new();
        for (round, slot) in self.slots.range(stable.next()..) {
            if let Some(cert) = &slot.certificate {
                certified.push(cert.clone());
            } else if let Some(proof) = &slot.prepared {
                debug_assert_eq!(proof.preprepare.round, *round);
                prepared.push(proof.clone());
            }
        }
        let vc = ViewChange {
            new_view: target,
            stable_round: stable,
            certified,
            prepared,
            remote_requests: self.remote_requests.iter().copied().collect(),
            sender: self.me,
        };
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.me.local, vc.clone());
        let mut out = vec![
            LocalAction::ViewChangeStarted {
                view: target,
                attempt: self.attempts,
                reason,
            },
            LocalAction::Broadcast(Message::ViewChange(vc)),
        ];
        out.extend(self.try_new_view(target, crypto));
        out.extend(self.retry_pending_new_view(crypto));
        out
    }

    pub fn handle_view_change(
        &mut self,
        from: ReplicaId,
        vc: &ViewChange,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<LocalAction> {
        let _ = keys;
        if vc.sender != from || vc.new_view <= self.view {
            return Vec::new();
        }
        let valid = vc.certified.iter().all(|cert| {
            cert.origin_cluster == self.me.cluster && verify_certificate(&self.config, crypto, cert).is_ok()
        }) && vc
            .prepared
            .iter()
            .all(|p| p.preprepare.origin_cluster == self.me.cluster);
        if !valid {
            return Vec::new();
        }
        self.view_changes
            .entry(vc.new_view)
            .or_default()
            .insert(from.local, vc.clone());

        let mut out = Vec::new();
        // Join once f+1 replicas want a view beyond ours.
        let mut wanted: BTreeMap<u16, View> = BTreeMap::new();
        for (view, senders) in self.view_changes.range(self.effective_view().next()..) {
            for sender in senders.keys() {
                wanted.insert(*sender, *view);
            }
        }
        wanted.remove(&self.me.local);
        let mut views: Vec<View> = wanted.into_values().collect();
        views.sort_unstable_by(|a, b| b.cmp(a));
        if let Some(join) = views.get(weak_quorum(&self.config) - 1) {
            out.extend(self.start_view_change(*join, Suspicion::Joined, crypto));
        }
        if let Mode::ViewChanging(target) = self.mode {
            out.extend(self.try_new_view(target, crypto));
        }
        out.extend(self.retry_pending_new_view(crypto));
        out
    }

    fn try_new_view(&mut self, target: View, crypto: &Crypto) -> Vec<LocalAction> {
        if self.primary_of(target) != self.me
            || self.mode != Mode::ViewChanging(target)
            || self.new_view_sent == Some(target)
        {
            return Vec::new();
        }
        let quorum = self.quorum();
        let Some(vcs) = self.view_changes.get(&target) else {
            return Vec::new();
        };
        if vcs.len() < quorum {
            return Vec::new();
        }
        let chosen: Vec<ViewChange> = vcs.values().take(quorum).cloned().collect();
        let preprepares = compute_new_view(self.me.cluster, target, &chosen);
        let nv = NewView {
            view: target,
            view_change_senders: chosen.iter().map(|vc| vc.sender).collect(),
            preprepares,
            sender: self.me,
        };
        self.new_view_sent = Some(target);
        let mut out = vec![LocalAction::Broadcast(Message::NewView(nv.clone()))];
        out.extend(self.install(&nv, &chosen, crypto));
        out
    }

    pub fn handle_new_view(
        &mut self,
        from: ReplicaId,
        nv: &NewView,
        crypto: &Crypto,
        keys: &KeyPair,
    ) -> Vec<LocalAction> {
        let _ = keys;
        if nv.sender != from || from != self.primary_of(nv.view) || nv.view <= self.view {
            return Vec::new();
        }
        if nv.view < self.effective_view() {
            return Vec::new();
        }
        self.pending_new_view = Some((from, nv.clone()));
        self.retry_pending_new_view(crypto)
    }

    fn retry_pending_new_view(&mut self, crypto: &Crypto) -> Vec<LocalAction> {
        let Some((_, nv)) = self.pending_new_view.clone() else {
            return Vec::new();
        };
        if nv.view <= self.view {
            self.pending_new_view = None;
            return Vec::new();
        }
        let distinct: BTreeSet<_> = nv.view_change_senders.iter().collect();
        if distinct.len() != nv.view_change_senders.len()
            || distinct.len() != self.quorum()
            || distinct.iter().any(|s| s.cluster != self.me.cluster)
        {
            self.pending_new_view = None;
            return self.start_view_change(nv.view.next(), Suspicion::BadNewView, crypto);
        }
        let Some(vcs) = self.view_changes.get(&nv.view) else {
            return Vec::new();
        };
        let mut chosen = Vec::new();
        for sender in &nv.view_change_senders {
            match vcs.get(&sender.local) {
                Some(vc) => chosen.push(vc.clone()),
                None => return Vec::new(),
            }
        }
        self.pending_new_view = None;
        if compute_new_view(self.me.cluster, nv.view, &chosen) != nv.preprepares {
            return self.start_view_change(nv.view.next(), Suspicion::BadNewView, crypto);
        }
        self.install(&nv, &chosen, crypto)
    }

    fn install(&mut self, nv: &NewView, chosen: &[ViewChange], crypto: &Crypto) -> Vec<LocalAction> {
        let min_s = chosen.iter().map(|vc| vc.stable_round).max().unwrap_or_default();
        let max_s = nv.preprepares.last().map(|pp| pp.round).unwrap_or(min_s).max(min_s);
        self.view = nv.view;
        self.mode = Mode::Normal;
        self.attempts = 0;
        self.view_changes = self.view_changes.split_off(&nv.view.next());
        for slot in self.slots.values_mut() {
            slot.reset_view_state();
        }
        self.next_round = max_s.next().max(self.stable.next());

        let mut out = Vec::new();
        for vc in chosen {
            for cert in &vc.certified {
                out.extend(self.adopt_certificate(cert));
            }
        }
        let mut requests: BTreeSet<RemoteRequest> = BTreeSet::new();
        for vc in chosen {
            requests.extend(vc.remote_requests.iter().copied());
        }
        self.remote_requests.extend(requests.iter().copied());
        out.push(LocalAction::ViewInstalled {
            view: nv.view,
            remote_requests: requests.into_iter().collect(),
        });

        let keys_needed = !self.is_primary();
        let primary = self.primary();
        for pp in &nv.preprepares {
            if pp.round <= self.settled() {
                continue;
            }
            if keys_needed {
                // Deferred to `resume_after_install`, which has the signing key.
                self.future
                    .entry(nv.view)
                    .or_default()
                    .insert(0, (primary, Message::PrePrepare(pp.clone())));
            } else {
                self.slots.entry(pp.round).or_default().preprepare = Some(pp.clone());
            }
        }
        let _ = crypto;
        out
    }

    /// Replays messages deferred for the current view. The replica calls this
    /// after any action batch that contains `ViewInstalled`.
    pub fn resume_after_install(&mut self, crypto: &Crypto, keys: &KeyPair) -> Vec<LocalAction> {
        let mut out = Vec::new();
        let stale: Vec<View> = self.future.range(..self.view).map(|(v, _)| *v).collect();
        for v in stale {
            self.future.remove(&v);
        }
        if self.mode != Mode::Normal {
            return out;
        }
        if let Some(batch) = self.future.remove(&self.view) {
            // New-view preprepares were queued first; keep their round order.
            let (mut pps, rest): (Vec<_>, Vec<_>) = batch
                .into_iter()
                .partition(|(_, m)| matches!(m, Message::PrePrepare(_)));
            pps.sort_by_key(|(_, m)| match m {
                Message::PrePrepare(pp) => pp.round,
                _ => Round::GENESIS,
            });
            for (from, msg) in pps.into_iter().chain(rest) {
                match &msg {
                    Message::PrePrepare(pp) if from == self.primary() => {
                        out.extend(self.accept_preprepare(pp, crypto, keys));
                    }
                    _ => out.extend(self.handle(from, &msg, crypto, keys)),
                }
            }
        }
        // Slots re-proposed by us as primary still need commits from ourselves
        // once backups prepare; nothing to send here.
        out
    }
}

/// Re-proposals for a new view from a set of `n - f` view-change messages:
/// every round above the highest stable checkpoint up to the highest round
/// any message mentions gets its certified request, else the highest-view
/// prepared request, else a no-op.
pub fn compute_new_view(cluster: ClusterId, view: View, vcs: &[ViewChange]) -> Vec<PrePrepare> {
    let min_s = vcs.iter().map(|vc| vc.stable_round).max().unwrap_or_default();
    let mut certified: BTreeMap<Round, &ClientRequest> = BTreeMap::new();
    let mut prepared: BTreeMap<Round, (View, &ClientRequest)> = BTreeMap::new();
    for vc in vcs {
        for cert in &vc.certified {
            certified.entry(cert.round).or_insert(&cert.request);
        }
        for proof in &vc.prepared {
            let pp = &proof.preprepare;
            let entry = prepared.entry(pp.round).or_insert((pp.view, &pp.request));
            if pp.view > entry.0 {
                *entry = (pp.view, &pp.request);
            }
        }
    }
    let max_s = certified
        .keys()
        .chain(prepared.keys())
        .copied()
        .max()
        .unwrap_or_default()
        .max(min_s);
    (min_s.0 + 1..=max_s.0)
        .map(Round)
        .map(|round| {
            let request = certified
                .get(&round)
                .map(|r| (*r).clone())
                .or_else(|| prepared.get(&round).map(|(_, r)| (*r).clone()))
                .unwrap_or_else(|| ClientRequest::noop(cluster, round));
            PrePrepare {
                view,
                round,
                origin_cluster: cluster,
                request_digest: request.digest(),
                request,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::Fixture;
    use std::collections::VecDeque;

    /// Synchronous router over the logs of one cluster.
    struct Cluster {
        fx: Fixture,
        logs: Vec<PbftLog>,
        down: BTreeSet<u16>,
        silent_primary: bool,
        certified: BTreeMap<u16, Vec<CommitCertificate>>,
        sent: usize,
        installed: BTreeMap<u16, View>,
    }

    impl Cluster {
        fn new(n: u16, f: u16) -> Self {
            let fx = Fixture::new(1, n, f);
            let logs = (1..=n)
                .map(|l| PbftLog::new(ReplicaId::new(1, l), fx.config.clone()))
                .collect();
            Cluster {
                fx,
                logs,
                down: BTreeSet::new(),
                silent_primary: false,
                certified: BTreeMap::new(),
                sent: 0,
                installed: BTreeMap::new(),
            }
        }

        fn run(&mut self, origin: u16, actions: Vec<LocalAction>) {
            let mut queue: VecDeque<(u16, LocalAction)> = actions.into_iter().map(|a| (origin, a)).collect();
            while let Some((at, action)) = queue.pop_front() {
                let n = self.logs.len() as u16;
                let (targets, msg): (Vec<u16>, Message) = match action {
                    LocalAction::Broadcast(m) => ((1..=n).filter(|l| *l != at).collect(), m),
                    LocalAction::Send(to, m) => (vec![to.local], m),
                    LocalAction::Certified { certificate, .. } => {
                        self.certified.entry(at).or_default().push(certificate);
                        continue;
                    }
                    LocalAction::ViewInstalled { view, .. } => {
                        self.installed.insert(at, view);
                        let i = usize::from(at - 1);
                        let more = self.logs[i].resume_after_install(&self.fx.crypto, &self.fx.keys[i]);
                        queue.extend(more.into_iter().map(|a| (at, a)));
                        continue;
                    }
                    _ => continue,
                };
                if self.down.contains(&at) {
                    continue;
                }
                if self.silent_primary && at == 1 && matches!(msg, Message::PrePrepare(_) | Message::NewView(_)) {
                    continue;
                }
                for to in targets {
                    self.sent += 1;
                    if self.down.contains(&to) {
                        continue;
                    }
                    let i = usize::from(to - 1);
                    let from = ReplicaId::new(1, at);
                    let out = self.logs[i].handle(from, &msg, &self.fx.crypto, &self.fx.keys[i]);
                    queue.extend(out.into_iter().map(|a| (to, a)));
                }
            }
        }

        fn propose(&mut self, round: u64, seq: u64) {
            let request = self.fx.request(1, seq);
            let out = self.logs[0].propose(Round(round), request, &self.fx.crypto).unwrap();
            self.run(1, out);
        }
    }

    #[test]
    fn propose_sends_to_backups_and_checks_role() {
        let fx = Fixture::new(1, 4, 1);
        let mut primary = PbftLog::new(ReplicaId::new(1, 1), fx.config.clone());
        let mut backup = PbftLog::new(ReplicaId::new(1, 2), fx.config.clone());
        let out = primary.propose(Round(1), fx.request(1, 1), &fx.crypto).unwrap();
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0], LocalAction::Broadcast(Message::PrePrepare(_))));
        assert_eq!(
            primary.propose(Round(1), fx.request(1, 2), &fx.crypto),
            Err(ProposeError::SlotOccupied)
        );
        assert_eq!(
            backup.propose(Round(1), fx.request(1, 1), &fx.crypto),
            Err(ProposeError::NotPrimary)
        );
    }

    #[test]
    fn failure_free_round_certifies_everywhere_with_exact_message_count() {
        let mut cluster = Cluster::new(4, 1);
        cluster.propose(1, 1);
        for l in 1..=4u16 {
            let certs = &cluster.certified[&l];
            assert_eq!(certs.len(), 1, "replica {l}");
            assert_eq!(certs[0].commits.len(), 3);
            verify_certificate(&cluster.fx.config, &cluster.fx.crypto, &certs[0]).unwrap();
        }
        // preprepare + prepare + commit: (n-1) + (n-1)^2 + n(n-1).
        assert_eq!(cluster.sent, 3 + 9 + 12);
    }

    #[test]
    fn backup_commits_once_supported_by_quorum() {
        let fx = Fixture::new(1, 4, 1);
        let mut backup = PbftLog::new(ReplicaId::new(1, 2), fx.config.clone());
        let pp = PrePrepare {
            view: View(0),
            round: Round(1),
            origin_cluster: ClusterId(1),
            request_digest: fx.request(1, 1).digest(),
            request: fx.request(1, 1),
        };
        let out = backup.handle(
            ReplicaId::new(1, 1),
            &Message::PrePrepare(pp.clone()),
            &fx.crypto,
            &fx.keys[1],
        );
        assert_eq!(out.len(), 1, "own prepare only");
        // Preprepare, own prepare and one more prepare: three in support.
        let prepare = Prepare {
            view: View(0),
            round: Round(1),
            request_digest: pp.request_digest,
            sender: ReplicaId::new(1, 3),
        };
        let out = backup.handle(
            ReplicaId::new(1, 3),
            &Message::Prepare(prepare),
            &fx.crypto,
            &fx.keys[1],
        );
        assert_eq!(
            out.iter()
                .filter(|a| matches!(a, LocalAction::Broadcast(Message::Commit(_))))
                .count(),
            1
        );
    }

    #[test]
    fn two_commits_are_not_a_certificate() {
        let fx = Fixture::new(1, 4, 1);
        let mut log = PbftLog::new(ReplicaId::new(1, 4), fx.config.clone());
        let request = fx.request(1, 1);
        let digest = request.digest();
        let pp = PrePrepare {
            view: View(0),
            round: Round(1),
            origin_cluster: ClusterId(1),
            request_digest: digest,
            request,
        };
        log.handle(ReplicaId::new(1, 1), &Message::PrePrepare(pp), &fx.crypto, &fx.keys[3]);
        let mut certified = 0;
        for l in 1..=3u16 {
            let c = fx.commit(l, View(0), Round(1), digest);
            let out = log.handle(ReplicaId::new(1, l), &Message::Commit(c), &fx.crypto, &fx.keys[3]);
            certified += out
                .iter()
                .filter(|a| matches!(a, LocalAction::Certified { .. }))
                .count();
            if l == 2 {
                assert_eq!(certified, 0);
            }
        }
        assert_eq!(certified, 1);
    }

    #[test]
    fn certificate_rejections() {
        let mut cluster = Cluster::new(4, 1);
        cluster.propose(1, 1);
        let cert = cluster.certified[&2][0].clone();
        let (config, crypto) = (&cluster.fx.config, &cluster.fx.crypto);
        assert_eq!(verify_certificate(config, crypto, &cert), Ok(()));

        let mut dup = cert.clone();
        dup.commits[1] = dup.commits[0].clone();
        assert_eq!(
            verify_certificate(config, crypto, &dup),
            Err(CertificateRejection::DuplicateSigner)
        );

        let mut short = cert.clone();
        short.commits.pop();
        assert_eq!(
            verify_certificate(config, crypto, &short),
            Err(CertificateRejection::Count)
        );

        let mut other = cert.clone();
        other.request = cluster.fx.request(1, 99);
        assert_eq!(
            verify_certificate(config, crypto, &other),
            Err(CertificateRejection::DigestMismatch)
        );

        for i in 0..cert.commits.len() {
            for b in 0..cert.commits[i].signature.bytes.len() {
                let mut bad = cert.clone();
                bad.commits[i].signature.bytes[b] ^= 0x01;
                assert_eq!(
                    verify_certificate(config, crypto, &bad),
                    Err(CertificateRejection::BadSignature),
                    "commit {i} byte {b}"
                );
            }
        }
        let back = CommitCertificate::from_canonical(&cert.to_canonical()).unwrap();
        assert_eq!(verify_certificate(config, crypto, &back), Ok(()));
    }

    #[test]
    fn checkpoint_needs_quorum_and_flags_divergence() {
        let fx = Fixture::new(1, 4, 1);
        let mut log = PbftLog::new(ReplicaId::new(1, 1), fx.config.clone());
        let d = crate::crypto::digest(b"state");
        let out = log.checkpoint(Round(6), d, &fx.crypto, &fx.keys[0]);
        assert_eq!(out.len(), 1);
        let cp = fx.checkpoint(2, Round(6), d);
        assert!(log
            .handle(ReplicaId::new(1, 2), &Message::Checkpoint(cp), &fx.crypto, &fx.keys[0])
            .is_empty());
        assert_eq!(log.stable_checkpoint(), Round(0));
        let cp = fx.checkpoint(3, Round(6), d);
        let out = log.handle(ReplicaId::new(1, 3), &Message::Checkpoint(cp), &fx.crypto, &fx.keys[0]);
        assert_eq!(out, vec![LocalAction::StableCheckpoint(Round(6))]);

        let mut other = PbftLog::new(ReplicaId::new(1, 4), fx.config.clone());
        other.checkpoint(Round(6), crate::crypto::digest(b"mine"), &fx.crypto, &fx.keys[3]);
        for l in 1..=3 {
            let cp = fx.checkpoint(l, Round(6), d);
            let out = other.handle(ReplicaId::new(1, l), &Message::Checkpoint(cp), &fx.crypto, &fx.keys[3]);
            if l == 3 {
                assert_eq!(out, vec![LocalAction::Divergence(Round(6))]);
            }
        }
    }

    #[test]
    fn lagging_replica_keeps_rounds_between_execution_and_stable_checkpoint() {
        let fx = Fixture::new(1, 4, 1);
        let me = ReplicaId::new(1, 4);
        let mut lagging = PbftLog::new(me, fx.config.clone());
        let d = crate::crypto::digest(b"state");
        for l in 1..=3 {
            let cp = fx.checkpoint(l, Round(6), d);
            lagging.handle(ReplicaId::new(1, l), &Message::Checkpoint(cp), &fx.crypto, &fx.keys[3]);
        }
        assert_eq!(lagging.stable_checkpoint(), Round(6));
        let preprepare = |round: u64| {
            let request = fx.request(1, round);
            Message::PrePrepare(PrePrepare {
                view: View(0),
                round: Round(round),
                origin_cluster: ClusterId(1),
                request_digest: request.digest(),
                request,
            })
        };
        let out = lagging.handle(ReplicaId::new(1, 1), &preprepare(3), &fx.crypto, &fx.keys[3]);
        assert!(out
            .iter()
            .any(|a| matches!(a, LocalAction::Broadcast(Message::Prepare(_)))));
        lagging.set_executed(Round(6));
        assert!(lagging
            .handle(ReplicaId::new(1, 1), &preprepare(4), &fx.crypto, &fx.keys[3])
            .is_empty());
    }

    fn suspect_all(cluster: &mut Cluster, who: &[u16]) {
        for &l in who {
            let i = usize::from(l - 1);
            if cluster.logs[i].view() != View(0) {
                continue;
            }
            let out = cluster.logs[i].suspect(Suspicion::Timeout, &cluster.fx.crypto);
            cluster.run(l, out);
        }
    }

    #[test]
    fn silent_primary_is_replaced_and_round_recovers() {
        let mut cluster = Cluster::new(4, 1);
        cluster.silent_primary = true;
        cluster.propose(1, 1);
        assert!(cluster.certified.is_empty());
        suspect_all(&mut cluster, &[2, 3, 4]);
        for l in 2..=4u16 {
            assert_eq!(cluster.logs[usize::from(l - 1)].view(), View(1));
            assert_eq!(cluster.logs[usize::from(l - 1)].mode(), Mode::Normal);
        }
        // The new primary (replica 2) proposes the request again.
        let request = cluster.fx.request(1, 1);
        let round = cluster.logs[1].next_round();
        let out = cluster.logs[1].propose(round, request, &cluster.fx.crypto).unwrap();
        cluster.run(2, out);
        for l in 2..=4u16 {
            assert_eq!(cluster.certified[&l].len(), 1, "replica {l}");
        }
    }

    #[test]
    fn certified_round_is_reproposed_unchanged() {
        let mut cluster = Cluster::new(4, 1);
        cluster.propose(1, 1);
        let before = cluster.certified[&3][0].request_digest();
        suspect_all(&mut cluster, &[1, 2, 3, 4]);
        let nv_round: Vec<_> = cluster.logs[2]
            .slots
            .get(&Round(1))
            .and_then(|s| s.preprepare.clone())
            .into_iter()
            .collect();
        assert_eq!(nv_round.len(), 1);
        assert_eq!(nv_round[0].request_digest, before);
        assert_eq!(nv_round[0].view, View(1));
        // Re-certified in view 1, never with a different request.
        for l in 1..=4u16 {
            for cert in &cluster.certified[&l] {
                assert_eq!(cert.request_digest(), before);
            }
        }
    }

    #[test]
    fn below_quorum_view_changes_do_not_produce_new_view() {
        let mut cluster = Cluster::new(4, 1);
        cluster.down.insert(3);
        cluster.down.insert(4);
        suspect_all(&mut cluster, &[1]);
        // Replica 2 would be primary of view 1 but only joins on f+1 = 2 requests.
        assert_eq!(cluster.logs[1].view(), View(0));
        suspect_all(&mut cluster, &[2]);
        // Two of four view-change messages: below n - f.
        assert_eq!(cluster.logs[1].mode(), Mode::ViewChanging(View(1)));
        assert!(cluster.installed.is_empty());
    }

    #[test]
    fn equivocation_triggers_immediate_suspicion() {
        let fx = Fixture::new(1, 4, 1);
        let mut log = PbftLog::new(ReplicaId::new(1, 2), fx.config.clone());
        let mk = |seq| {
            let request = fx.request(1, seq);
            PrePrepare {
                view: View(0),
                round: Round(1),
                origin_cluster: ClusterId(1),
                request_digest: request.digest(),
                request,
            }
        };
        log.handle(
            ReplicaId::new(1, 1),
            &Message::PrePrepare(mk(1)),
            &fx.crypto,
            &fx.keys[1],
        );
        let out = log.handle(
            ReplicaId::new(1, 1),
            &Message::PrePrepare(mk(2)),
            &fx.crypto,
            &fx.keys[1],
        );
        assert!(out.iter().any(|a| matches!(
            a,
            LocalAction::ViewChangeStarted {
                reason: Suspicion::Equivocation,
                ..
            }
        )));
        assert_eq!(log.conflicts(), 1);
    }

    #[test]
    fn new_view_fills_gaps_with_noops() {
        let fx = Fixture::new(1, 4, 1);
        let request = fx.request(1, 1);
        let pp = PrePrepare {
            view: View(0),
            round: Round(3),
            origin_cluster: ClusterId(1),
            request_digest: request.digest(),
            request,
        };
        let vc = |l: u16, prepared: Vec<PreparedProof>| ViewChange {
            new_view: View(1),
            stable_round: Round(1),
            certified: vec![],
            prepared,
            remote_requests: vec![],
            sender: ReplicaId::new(1, l),
        };
        let proof = PreparedProof {
            preprepare: pp.clone(),
            prepare_senders: vec![2, 3],
        };
        let got = compute_new_view(
            ClusterId(1),
            View(1),
            &[vc(1, vec![]), vc(2, vec![proof]), vc(3, vec![])],
        );
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].round, Round(2));
        assert!(got[0].request.is_noop());
        assert_eq!(got[1].request_digest, pp.request_digest);
        assert_eq!(got[1].view, View(1));
    }
}

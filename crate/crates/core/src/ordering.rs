//! Round assembly, execution, the block ledger and client acceptance.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{digest, digest_parts, Crypto, Digest};
use crate::local_replication::{verify_certificate, CertificateRejection, CommitCertificate};
use crate::messages::ClientResponse;
use crate::types::{execution_order, weak_quorum, ClientId, ClientRequest, ClusterId, Round, SystemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Insert {
    New,
    /// Same request already held.
    Duplicate,
    /// A different request is held for this slot; the new one is ignored.
    Conflict,
    /// The round already executed.
    Stale,
}

/// Certified requests of one round, one slot per cluster.
#[derive(Clone, Debug, Default)]
pub struct RoundBuffer {
    slots: BTreeMap<ClusterId, CommitCertificate>,
}

impl RoundBuffer {
    pub fn get(&self, cluster: ClusterId) -> Option<&CommitCertificate> {
        self.slots.get(&cluster)
    }

    pub fn is_complete(&self, z: u16) -> bool {
        self.slots.len() == usize::from(z)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Round buffers for every round that has not executed yet.
#[derive(Clone, Debug, Default)]
pub struct RoundBuffers {
    rounds: BTreeMap<Round, RoundBuffer>,
    executed: Round,
}

impl RoundBuffers {
    pub fn insert(&mut self, cert: CommitCertificate) -> Insert {
        if cert.round <= self.executed {
            return Insert::Stale;
        }
        let buffer = self.rounds.entry(cert.round).or_default();
        match buffer.slots.get(&cert.origin_cluster) {
            Some(held) if held.request_digest() == cert.request_digest() => Insert::Duplicate,
            Some(_) => Insert::Conflict,
            None => {
                buffer.slots.insert(cert.origin_cluster, cert);
                Insert::New
            }
        }
    }

    pub fn get(&self, cluster: ClusterId, round: Round) -> Option<&CommitCertificate> {
        self.rounds.get(&round).and_then(|b| b.get(cluster))
    }

    pub fn round(&self, round: Round) -> Option<&RoundBuffer> {
        self.rounds.get(&round)
    }

    /// Highest round holding a request from a cluster other than `own`.
    pub fn max_foreign_round(&self, own: ClusterId) -> Option<Round> {
        self.rounds
            .iter()
            .rev()
            .find(|(_, b)| b.slots.keys().any(|c| *c != own))
            .map(|(r, _)| *r)
    }

    pub fn executed(&self) -> Round {
        self.executed
    }

    fn take_next_complete(&mut self, z: u16) -> Option<(Round, RoundBuffer)> {
        let next = self.executed.next();
        if !self.rounds.get(&next)?.is_complete(z) {
            return None;
        }
        let buffer = self.rounds.remove(&next)?;
        self.executed = next;
        Some((next, buffer))
    }
}

/// Ledger height of the request of `cluster` in `round`: `(round - 1) * z + cluster`.
pub fn block_height(round: Round, cluster: ClusterId, z: u16) -> u64 {
    (round.0 - 1) * u64::from(z) + u64::from(cluster.0)
}

/// Inverse of [`block_height`].
pub fn height_position(height: u64, z: u16) -> (Round, ClusterId) {
    let z = u64::from(z);
    (Round((height - 1) / z + 1), ClusterId(((height - 1) % z) as u16 + 1))
}

/// One executed request.
///
/// The chain links blocks by the digest of their chain form: height, round,
/// cluster, request and parent digest. The certificate is verified on its own
/// and kept out of the chain form, because honest replicas may hold different
/// but equally valid certificates for the same request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub round: Round,
    pub cluster: ClusterId,
    pub request: ClientRequest,
    pub certificate: CommitCertificate,
    pub parent_digest: Digest,
}

impl Block {
    /// Bytes the chain links over; the request enters through its digest.
    pub fn chain_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(96);
        enc.u64(self.height)
            .round(self.round)
            .cluster(self.cluster)
            .put(&self.request.digest())
            .put(&self.parent_digest);
        enc.finish()
    }

    pub fn digest(&self) -> Digest {
        digest(&self.chain_bytes())
    }
}

impl Canonical for Block {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .round(self.round)
            .cluster(self.cluster)
            .put(&self.request)
            .put(&self.parent_digest)
            .put(&self.certificate);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let height = dec.u64()?;
        let round = dec.round()?;
        let cluster = dec.cluster()?;
        let request = dec.get()?;
        let parent_digest = dec.get()?;
        let certificate = dec.get()?;
        Ok(Block {
            height,
            round,
            cluster,
            request,
            certificate,
            parent_digest,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Ledger {
    blocks: Vec<Block>,
    head: Digest,
}

impl Ledger {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn last_round(&self) -> Round {
        self.blocks.last().map(|b| b.round).unwrap_or_default()
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        let i = usize::try_from(height.checked_sub(1)?).ok()?;
        self.blocks.get(i)
    }

    pub fn certificate(&self, cluster: ClusterId, round: Round, z: u16) -> Option<&CommitCertificate> {
        if round == Round::GENESIS {
            return None;
        }
        self.block(block_height(round, cluster, z)).map(|b| &b.certificate)
    }

    fn append(&mut self, certificate: CommitCertificate, z: u16) -> &Block {
        let block = Block {
            height: block_height(certificate.round, certificate.origin_cluster, z),
            round: certificate.round,
            cluster: certificate.origin_cluster,
            request: certificate.request.clone(),
            certificate,
            parent_digest: self.head,
        };
        debug_assert_eq!(block.height, self.blocks.len() as u64 + 1);
        self.head = block.digest();
        self.blocks.push(block);
        self.blocks.last().unwrap()
    }

    /// Newline-delimited hex of each block's canonical form.
    pub fn export_ndjson(&self) -> String {
        export_blocks(&self.blocks)
    }
}

pub fn export_blocks(blocks: &[Block]) -> String {
    let mut out = String::new();
    for block in blocks {
        out.push_str(&hex::encode(block.to_canonical()));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImportError {
    #[error("line {line}: not hex")]
    Hex { line: usize },
    #[error("line {line}: {source}")]
    Decode { line: usize, source: DecodeError },
}

pub fn import_ndjson(text: &str) -> Result<Vec<Block>, ImportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bytes = hex::decode(line.trim()).map_err(|_| ImportError::Hex { line: i + 1 })?;
            Block::from_canonical(&bytes).map_err(|source| ImportError::Decode { line: i + 1, source })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum LedgerFault {
    #[error("height out of sequence")]
    Height,
    #[error("block position does not match its round and cluster")]
    Position,
    #[error("parent digest breaks the chain")]
    Chain,
    #[error("block request differs from its certificate")]
    Request,
    #[error("certificate rejected: {0}")]
    Certificate(CertificateRejection),
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("ledger rejected at height {height}: {fault}")]
pub struct LedgerRejection {
    pub height: u64,
    pub fault: LedgerFault,
}

/// Checks the digest chain, height sequence, cluster order and every certificate.
pub fn verify_ledger(blocks: &[Block], config: &SystemConfig, crypto: &Crypto) -> Result<Digest, LedgerRejection> {
    let mut parent = Digest::ZERO;
    for (i, block) in blocks.iter().enumerate() {
        let height = i as u64 + 1;
        let reject = |fault| LedgerRejection { height, fault };
        if block.height != height {
            return Err(reject(LedgerFault::Height));
        }
        if height_position(height, config.z) != (block.round, block.cluster) {
            return Err(reject(LedgerFault::Position));
        }
        if block.parent_digest != parent {
            return Err(reject(LedgerFault::Chain));
        }
        let cert = &block.certificate;
        if cert.request != block.request || cert.round != block.round || cert.origin_cluster != block.cluster {
            return Err(reject(LedgerFault::Request));
        }
        verify_certificate(config, crypto, cert).map_err(|r| reject(LedgerFault::Certificate(r)))?;
        parent = block.digest();
    }
    Ok(parent)
}

/// The replicated key-value store.
///
/// The state digest uses an additive multiset hash over `(key, value)` entries
/// so it updates in constant time per write.
#[derive(Clone, Debug, Default)]
pub struct ExecutionState {
    /// Each value is kept with its entry hash.
    store: HashMap<String, (Vec<u8>, [u64; 4])>,
    executed_txns: u64,
    last_seq: BTreeMap<ClientId, u64>,
    acc: [u64; 4],
}

fn limbs(d: &Digest) -> [u64; 4] {
    std::array::from_fn(|i| u64::from_le_bytes(d.0[i * 8..i * 8 + 8].try_into().unwrap()))
}

fn add256(acc: &mut [u64; 4], x: [u64; 4]) {
    let mut carry = false;
    for i in 0..4 {
        let (s1, c1) = acc[i].overflowing_add(x[i]);
        let (s2, c2) = s1.overflowing_add(u64::from(carry));
        acc[i] = s2;
        carry = c1 || c2;
    }
}

fn sub256(acc: &mut [u64; 4], x: [u64; 4]) {
    let mut borrow = false;
    for i in 0..4 {
        let (d1, b1) = acc[i].overflowing_sub(x[i]);
        let (d2, b2) = d1.overflowing_sub(u64::from(borrow));
        acc[i] = d2;
        borrow = b1 || b2;
    }
}

impl ExecutionState {
    pub fn executed_txns(&self) -> u64 {
        self.executed_txns
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.store.get(key).map(|(v, _)| v.as_slice())
    }

    pub fn last_seq(&self, client: &ClientId) -> Option<u64> {
        self.last_seq.get(client).copied()
    }

    /// Applies a request's writes in payload order. A request whose
    /// `(client, seq)` already executed is skipped; returns whether it applied.
    pub fn apply(&mut self, request: &ClientRequest) -> bool {
        if request.is_noop() {
            return false;
        }
        if self.last_seq.get(&request.client).is_some_and(|s| *s >= request.seq) {
            return false;
        }
        self.last_seq.insert(request.client, request.seq);
        for (write, d) in request.payload.iter().zip(request.payload.write_digests()) {
            let h = limbs(d);
            add256(&mut self.acc, h);
            match self.store.get_mut(&write.key) {
                Some(slot) => {
                    sub256(&mut self.acc, slot.1);
                    slot.0.clone_from(&write.value);
                    slot.1 = h;
                }
                None => {
                    self.store.insert(write.key.clone(), (write.value.clone(), h));
                }
            }
        }
        self.executed_txns += request.transactions();
        true
    }

    pub fn state_digest(&self) -> Digest {
        let mut enc = Encoder::with_capacity(48);
        enc.fixed(b"state").u64(self.executed_txns);
        for limb in self.acc {
            enc.u64(limb);
        }
        digest(&enc.finish())
    }

    /// Rebuilds the store from a ledger.
    pub fn replay(blocks: &[Block]) -> Self {
        let mut state = ExecutionState::default();
        for block in blocks {
            state.apply(&block.request);
        }
        state
    }
}

/// Result digest a replica reports to the client for one executed request.
pub fn result_digest(request_digest: &Digest, round: Round, applied: bool) -> Digest {
    digest_parts(&[
        b"result",
        &request_digest.0,
        &round.0.to_le_bytes(),
        &[u8::from(applied)],
    ])
}

#[derive(Clone, Debug)]
pub struct ExecutedRequest {
    pub request: ClientRequest,
    pub applied: bool,
    pub result: Digest,
}

#[derive(Clone, Debug)]
pub struct ExecutedRound {
    pub round: Round,
    pub requests: Vec<ExecutedRequest>,
    /// The executed-transaction count crossed a checkpoint boundary.
    pub checkpoint: bool,
}

/// Executes every complete round in order, appending `z` blocks per round.
pub fn try_execute(
    state: &mut ExecutionState,
    ledger: &mut Ledger,
    buffers: &mut RoundBuffers,
    config: &SystemConfig,
) -> Vec<ExecutedRound> {
    let mut out = Vec::new();
    while let Some((round, buffer)) = buffers.take_next_complete(config.z) {
        let ordered = execution_order(round, config.z, buffer.slots).expect("complete round");
        let before = state.executed_txns / config.checkpoint_period;
        let mut requests = Vec::with_capacity(ordered.len());
        for cert in ordered {
            let applied = state.apply(&cert.request);
            let result = result_digest(&cert.request_digest(), round, applied);
            let request = cert.request.clone();
            ledger.append(cert, config.z);
            requests.push(ExecutedRequest {
                request,
                applied,
                result,
            });
        }
        out.push(ExecutedRound {
            round,
            requests,
            checkpoint: state.executed_txns / config.checkpoint_period > before,
        });
    }
    out
}

/// Rounds an idle primary fills with no-ops: from its next round up to the
/// highest round other clusters have shown demand for, within its window.
pub fn noop_rounds(queue_empty: bool, next_round: Round, demanded: Option<Round>, limit: Round) -> Vec<Round> {
    match demanded {
        Some(demanded) if queue_empty => (next_round.0..=demanded.0.min(limit.0)).map(Round).collect(),
        _ => Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acceptance {
    Accepted(Digest),
    Pending,
    /// Two different results each reached `f + 1` responders.
    Conflict,
}

/// Client-side acceptance: `f + 1` distinct responders agreeing on a result.
pub fn client_accept(responses: &[ClientResponse], config: &SystemConfig) -> Acceptance {
    let mut by_result: BTreeMap<Digest, std::collections::BTreeSet<_>> = BTreeMap::new();
    for r in responses {
        by_result.entry(r.result).or_default().insert(r.responder);
    }
    let winners: Vec<Digest> = by_result
        .into_iter()
        .filter(|(_, who)| who.len() >= weak_quorum(config))
        .map(|(d, _)| d)
        .collect();
    match winners.as_slice() {
        [] => Acceptance::Pending,
        [one] => Acceptance::Accepted(*one),
        _ => Acceptance::Conflict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Principal;
    use crate::testing::Fixture;
    use crate::types::Payload;
    use crate::types::{ReplicaId, View, Write};
    use proptest::prelude::*;

    fn cert(fx: &Fixture, cluster: u16, round: u64, request: ClientRequest) -> CommitCertificate {
        fx.certificate(cluster, round, request)
    }

    fn build_ledger(fx: &Fixture, rounds: u64) -> (Ledger, ExecutionState) {
        let mut ledger = Ledger::default();
        let mut state = ExecutionState::default();
        let mut buffers = RoundBuffers::default();
        for r in 1..=rounds {
            for c in 1..=fx.config.z {
                let request = if (r + u64::from(c)) % 4 == 0 {
                    ClientRequest::noop(ClusterId(c), Round(r))
                } else {
                    fx.request(c, r)
                };
                buffers.insert(cert(fx, c, r, request));
            }
        }
        try_execute(&mut state, &mut ledger, &mut buffers, &fx.config);
        (ledger, state)
    }

    #[test]
    fn complete_round_appends_z_blocks() {
        let fx = Fixture::new(2, 4, 1);
        let mut buffers = RoundBuffers::default();
        let (mut ledger, mut state) = (Ledger::default(), ExecutionState::default());
        assert_eq!(buffers.insert(cert(&fx, 2, 1, fx.request(2, 1))), Insert::New);
        assert!(try_execute(&mut state, &mut ledger, &mut buffers, &fx.config).is_empty());
        buffers.insert(cert(&fx, 1, 1, fx.request(1, 1)));
        let done = try_execute(&mut state, &mut ledger, &mut buffers, &fx.config);
        assert_eq!(done.len(), 1);
        let heights: Vec<_> = ledger.blocks().iter().map(|b| (b.height, b.cluster)).collect();
        assert_eq!(heights, vec![(1, ClusterId(1)), (2, ClusterId(2))]);
        assert_eq!(buffers.insert(cert(&fx, 1, 1, fx.request(1, 1))), Insert::Stale);
    }

    #[test]
    fn later_round_waits_for_earlier() {
        let fx = Fixture::new(2, 4, 1);
        let mut buffers = RoundBuffers::default();
        let (mut ledger, mut state) = (Ledger::default(), ExecutionState::default());
        buffers.insert(cert(&fx, 1, 2, fx.request(1, 2)));
        buffers.insert(cert(&fx, 2, 2, fx.request(2, 2)));
        buffers.insert(cert(&fx, 1, 1, fx.request(1, 1)));
        assert!(try_execute(&mut state, &mut ledger, &mut buffers, &fx.config).is_empty());
        buffers.insert(cert(&fx, 2, 1, fx.request(2, 1)));
        assert_eq!(try_execute(&mut state, &mut ledger, &mut buffers, &fx.config).len(), 2);
        assert_eq!(ledger.len(), 4);
    }

    #[test]
    fn conflicting_slot_keeps_first() {
        let fx = Fixture::new(2, 4, 1);
        let mut buffers = RoundBuffers::default();
        buffers.insert(cert(&fx, 1, 1, fx.request(1, 1)));
        assert_eq!(buffers.insert(cert(&fx, 1, 1, fx.request(1, 1))), Insert::Duplicate);
        assert_eq!(buffers.insert(cert(&fx, 1, 1, fx.request(1, 9))), Insert::Conflict);
        assert_eq!(buffers.get(ClusterId(1), Round(1)).unwrap().request, fx.request(1, 1));
    }

    #[test]
    fn ledger_verifies_and_replays() {
        let fx = Fixture::new(2, 4, 1);
        let (ledger, state) = build_ledger(&fx, 5);
        assert_eq!(ledger.len(), 10);
        assert_eq!(
            verify_ledger(ledger.blocks(), &fx.config, &fx.crypto),
            Ok(ledger.head())
        );
        assert_eq!(
            ExecutionState::replay(ledger.blocks()).state_digest(),
            state.state_digest()
        );
        let text = ledger.export_ndjson();
        assert_eq!(import_ndjson(&text).unwrap(), ledger.blocks());
    }

    #[test]
    fn swapped_blocks_reject_at_first_swapped_height() {
        let fx = Fixture::new(2, 4, 1);
        let (ledger, _) = build_ledger(&fx, 5);
        let mut blocks = ledger.blocks().to_vec();
        blocks.swap(4, 5);
        assert_eq!(verify_ledger(&blocks, &fx.config, &fx.crypto).unwrap_err().height, 5);
    }

    #[test]
    fn every_byte_flip_in_a_ten_block_ledger_is_rejected() {
        let fx = Fixture::new(2, 4, 1);
        let (ledger, _) = build_ledger(&fx, 5);
        for (i, block) in ledger.blocks().iter().enumerate() {
            let bytes = block.to_canonical();
            for pos in 0..bytes.len() {
                let mut tampered = bytes.clone();
                tampered[pos] ^= 0x20;
                let Ok(forged) = Block::from_canonical(&tampered) else {
                    continue;
                };
                let mut blocks = ledger.blocks().to_vec();
                blocks[i] = forged;
                let verdict = verify_ledger(&blocks, &fx.config, &fx.crypto);
                assert!(verdict.is_err(), "block {i} byte {pos} accepted");
                assert!(verdict.unwrap_err().height <= i as u64 + 2);
            }
        }
    }

    #[test]
    fn payload_flip_at_height_three_rejects_there() {
        let fx = Fixture::new(2, 4, 1);
        let (ledger, _) = build_ledger(&fx, 5);
        let mut blocks = ledger.blocks().to_vec();
        assert!(!blocks[2].request.payload.is_empty());
        blocks[2].request.payload.writes_mut()[0].value[0] ^= 1;
        assert_eq!(verify_ledger(&blocks, &fx.config, &fx.crypto).unwrap_err().height, 3);
    }

    #[test]
    fn duplicate_requests_do_not_write_twice() {
        let fx = Fixture::new(1, 4, 1);
        let mut state = ExecutionState::default();
        let r = fx.request(1, 1);
        assert!(state.apply(&r));
        let digest = state.state_digest();
        assert!(!state.apply(&r));
        assert_eq!(state.state_digest(), digest);
        assert_eq!(state.executed_txns(), 1);
    }

    #[test]
    fn noop_policy() {
        assert_eq!(
            noop_rounds(true, Round(3), Some(Round(5)), Round(100)),
            vec![Round(3), Round(4), Round(5)]
        );
        assert!(noop_rounds(false, Round(3), Some(Round(5)), Round(100)).is_empty());
        assert!(noop_rounds(true, Round(3), None, Round(100)).is_empty());
        assert_eq!(
            noop_rounds(true, Round(3), Some(Round(9)), Round(4)),
            vec![Round(3), Round(4)]
        );
    }

    fn response(local: u16, result: Digest) -> ClientResponse {
        ClientResponse {
            client: ClientId([1; 32]),
            seq: 1,
            round: Round(1),
            result,
            responder: ReplicaId::new(1, local),
            view: View(0),
        }
    }

    #[test]
    fn client_needs_f_plus_one_matching() {
        let good = digest(b"ok");
        let bad = digest(b"bad");
        let f1 = SystemConfig::with_shape(1, 4, 1).unwrap();
        assert_eq!(
            client_accept(&[response(1, good), response(2, good)], &f1),
            Acceptance::Accepted(good)
        );
        assert_eq!(client_accept(&[response(1, good)], &f1), Acceptance::Pending);
        assert_eq!(
            client_accept(&[response(1, good), response(1, good)], &f1),
            Acceptance::Pending
        );
        let f2 = SystemConfig::with_shape(1, 7, 2).unwrap();
        let mixed = [
            response(1, good),
            response(2, bad),
            response(3, good),
            response(4, bad),
            response(5, good),
        ];
        assert_eq!(client_accept(&mixed, &f2), Acceptance::Accepted(good));
        assert_eq!(
            client_accept(
                &[response(1, good), response(2, good), response(3, bad), response(4, bad)],
                &f1
            ),
            Acceptance::Conflict
        );
    }

    proptest! {
        #[test]
        fn state_digest_ignores_write_order_across_distinct_keys(
            entries in prop::collection::btree_map(any::<u8>(), any::<u8>(), 1..30),
            rotate in 0usize..30,
        ) {
            let mk = |payload: Vec<Write>| ClientRequest {
                client: ClientId([2; 32]),
                cluster: ClusterId(1),
                seq: 1,
                payload: Payload::new(payload),
                auth: crate::types::RequestAuth::Client(crate::crypto::Signature {
                    signer: Principal::Client(ClientId([2; 32])),
                    bytes: vec![],
                }),
            };
            let mut writes: Vec<Write> = entries
                .iter()
                .map(|(k, v)| Write { key: format!("k{k}"), value: vec![*v] })
                .collect();
            let mut a = ExecutionState::default();
            a.apply(&mk(writes.clone()));
            let k = rotate % writes.len();
            writes.rotate_left(k);
            writes.reverse();
            let mut b = ExecutionState::default();
            b.apply(&mk(writes));
            prop_assert_eq!(a.state_digest(), b.state_digest());
        }

        #[test]
        fn overwrites_match_fresh_state(first in any::<u8>(), second in any::<u8>()) {
            let mk = |seq: u64, v: u8| ClientRequest {
                client: ClientId([3; 32]),
                cluster: ClusterId(1),
                seq,
                payload: Payload::new(vec![Write { key: "x".into(), value: vec![v] }]),
                auth: crate::types::RequestAuth::Client(crate::crypto::Signature {
                    signer: Principal::Client(ClientId([3; 32])),
                    bytes: vec![],
                }),
            };
            let mut overwritten = ExecutionState::default();
            overwritten.apply(&mk(1, first));
            overwritten.apply(&mk(2, second));
            let mut fresh = ExecutionState::default();
            fresh.apply(&mk(1, second));
            fresh.executed_txns += 1;
            prop_assert_eq!(overwritten.state_digest(), fresh.state_digest());
        }
    }
}

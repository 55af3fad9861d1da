//! Protocol messages and their canonical encodings.

use std::sync::Arc;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{AuthClass, Digest, MacTag, Principal, Signature};
use crate::local_replication::CommitCertificate;
use crate::types::{ClientId, ClientRequest, ClusterId, Payload, ReplicaId, RequestAuth, Round, View, Write};

impl Canonical for Write {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.key).bytes(&self.value);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Write {
            key: dec.string()?,
            value: dec.bytes()?,
        })
    }
}

impl Payload {
    /// Hash over the write digests, computed once per shared payload.
    pub fn digest(&self) -> Digest {
        self.cached_digest(|writes| {
            let mut enc = Encoder::with_capacity(16 + 32 * writes.len());
            enc.fixed(b"payload").seq(writes);
            crate::crypto::digest(&enc.finish())
        })
    }
}

impl Write {
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::with_capacity(self.key.len() + self.value.len() + 16);
        enc.fixed(b"kv").str(&self.key).bytes(&self.value);
        crate::crypto::digest(&enc.finish())
    }
}

impl ClientRequest {
    /// Bytes covered by the client's signature: everything except the
    /// signature, with the writes represented by their digest.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(96);
        enc.fixed(b"request")
            .fixed(&self.client.0)
            .cluster(self.cluster)
            .u64(self.seq)
            .fixed(&self.payload.digest().0);
        enc.finish()
    }

    /// Hash of the request with its writes represented by their digest.
    pub fn digest(&self) -> Digest {
        let mut enc = Encoder::with_capacity(160);
        match &self.auth {
            RequestAuth::Client(sig) => {
                enc.u8(1).fixed(&self.signing_bytes()).put(sig);
            }
            RequestAuth::Noop { .. } => self.encode(&mut enc),
        }
        crate::crypto::digest(&enc.finish())
    }
}

impl Canonical for ClientRequest {
    fn encode(&self, enc: &mut Encoder) {
        match &self.auth {
            RequestAuth::Client(sig) => {
                enc.u8(1)
                    .fixed(&self.client.0)
                    .cluster(self.cluster)
                    .u64(self.seq)
                    .seq(&self.payload)
                    .put(sig);
            }
            RequestAuth::Noop { round } => {
                enc.u8(0).cluster(self.cluster).round(*round);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => {
                let cluster = dec.cluster()?;
                let round = dec.round()?;
                Ok(ClientRequest::noop(cluster, round))
            }
            1 => Ok(ClientRequest {
                client: ClientId(dec.fixed()?),
                cluster: dec.cluster()?,
                seq: dec.u64()?,
                payload: Payload::new(dec.seq()?),
                auth: RequestAuth::Client(dec.get()?),
            }),
            tag => Err(DecodeError::BadTag { what: "request", tag }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrePrepare {
    pub view: View,
    pub round: Round,
    pub origin_cluster: ClusterId,
    pub request_digest: Digest,
    pub request: ClientRequest,
}

impl Canonical for PrePrepare {
    fn encode(&self, enc: &mut Encoder) {
        enc.view(self.view)
            .round(self.round)
            .cluster(self.origin_cluster)
            .put(&self.request_digest)
            .put(&self.request);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(PrePrepare {
            view: dec.view()?,
            round: dec.round()?,
            origin_cluster: dec.cluster()?,
            request_digest: dec.get()?,
            request: dec.get()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepare {
    pub view: View,
    pub round: Round,
    pub request_digest: Digest,
    pub sender: ReplicaId,
}

impl Canonical for Prepare {
    fn encode(&self, enc: &mut Encoder) {
        enc.view(self.view)
            .round(self.round)
            .put(&self.request_digest)
            .replica(self.sender);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Prepare {
            view: dec.view()?,
            round: dec.round()?,
            request_digest: dec.get()?,
            sender: dec.replica()?,
        })
    }
}

/// A signed COMMIT vote; forwarded inside commit certificates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Commit {
    pub view: View,
    pub round: Round,
    pub request_digest: Digest,
    pub sender: ReplicaId,
    pub signature: Signature,
}

impl Commit {
    pub fn signing_bytes(view: View, round: Round, digest: &Digest, sender: ReplicaId) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(64);
        enc.fixed(b"commit").view(view).round(round).put(digest).replica(sender);
        enc.finish()
    }
}

impl Canonical for Commit {
    fn encode(&self, enc: &mut Encoder) {
        enc.view(self.view)
            .round(self.round)
            .put(&self.request_digest)
            .replica(self.sender)
            .put(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Commit {
            view: dec.view()?,
            round: dec.round()?,
            request_digest: dec.get()?,
            sender: dec.replica()?,
            signature: dec.get()?,
        })
    }
}

/// Signed digest of the execution state after `round`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub round: Round,
    pub state_digest: Digest,
    pub sender: ReplicaId,
    pub signature: Signature,
}

impl Checkpoint {
    pub fn signing_bytes(round: Round, state_digest: &Digest, sender: ReplicaId) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(64);
        enc.fixed(b"checkpoint").round(round).put(state_digest).replica(sender);
        enc.finish()
    }
}

impl Canonical for Checkpoint {
    fn encode(&self, enc: &mut Encoder) {
        enc.round(self.round)
            .put(&self.state_digest)
            .replica(self.sender)
            .put(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Checkpoint {
            round: dec.round()?,
            state_digest: dec.get()?,
            sender: dec.replica()?,
            signature: dec.get()?,
        })
    }
}

/// A preprepare plus the backups that prepared it in its view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedProof {
    pub preprepare: PrePrepare,
    pub prepare_senders: Vec<u16>,
}

impl Canonical for PreparedProof {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.preprepare).u32(self.prepare_senders.len() as u32);
        for s in &self.prepare_senders {
            enc.u16(*s);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let preprepare = dec.get()?;
        let count = dec.u32()? as usize;
        if count > u16::MAX as usize {
            return Err(DecodeError::BadLength(count as u64));
        }
        let prepare_senders = (0..count).map(|_| dec.u16()).collect::<Result<_, _>>()?;
        Ok(PreparedProof {
            preprepare,
            prepare_senders,
        })
    }
}

/// A remote cluster's honored request that `round` be (re)shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RemoteRequest {
    pub requester: ClusterId,
    pub round: Round,
}

impl Canonical for RemoteRequest {
    fn encode(&self, enc: &mut Encoder) {
        enc.cluster(self.requester).round(self.round);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(RemoteRequest {
            requester: dec.cluster()?,
            round: dec.round()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChange {
    pub new_view: View,
    pub stable_round: Round,
    pub certified: Vec<CommitCertificate>,
    pub prepared: Vec<PreparedProof>,
    pub remote_requests: Vec<RemoteRequest>,
    pub sender: ReplicaId,
}

impl Canonical for ViewChange {
    fn encode(&self, enc: &mut Encoder) {
        enc.view(self.new_view)
            .round(self.stable_round)
            .seq(&self.certified)
            .seq(&self.prepared)
            .seq(&self.remote_requests)
            .replica(self.sender);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ViewChange {
            new_view: dec.view()?,
            stable_round: dec.round()?,
            certified: dec.seq()?,
            prepared: dec.seq()?,
            remote_requests: dec.seq()?,
            sender: dec.replica()?,
        })
    }
}

impl Canonical for ReplicaId {
    fn encode(&self, enc: &mut Encoder) {
        enc.replica(*self);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.replica()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub view: View,
    /// Senders of the view-change messages the re-proposals were computed from.
    pub view_change_senders: Vec<ReplicaId>,
    pub preprepares: Vec<PrePrepare>,
    pub sender: ReplicaId,
}

impl Canonical for NewView {
    fn encode(&self, enc: &mut Encoder) {
        enc.view(self.view)
            .seq(&self.view_change_senders)
            .seq(&self.preprepares)
            .replica(self.sender);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(NewView {
            view: dec.view()?,
            view_change_senders: dec.seq()?,
            preprepares: dec.seq()?,
            sender: dec.replica()?,
        })
    }
}

/// A certified request shared between clusters. The certificate carries the
/// request, origin cluster and round, so they cannot disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalShareMessage {
    pub certificate: CommitCertificate,
}

impl GlobalShareMessage {
    pub fn request(&self) -> &ClientRequest {
        &self.certificate.request
    }

    pub fn origin_cluster(&self) -> ClusterId {
        self.certificate.origin_cluster
    }

    pub fn round(&self) -> Round {
        self.certificate.round
    }
}

impl Canonical for GlobalShareMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.certificate);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(GlobalShareMessage {
            certificate: dec.get()?,
        })
    }
}

/// Local agreement that `target` failed to share `round`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrvcMessage {
    pub target: ClusterId,
    pub round: Round,
    pub v: u64,
    pub sender: ReplicaId,
}

impl Canonical for DrvcMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.cluster(self.target)
            .round(self.round)
            .u64(self.v)
            .replica(self.sender);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DrvcMessage {
            target: dec.cluster()?,
            round: dec.round()?,
            v: dec.u64()?,
            sender: dec.replica()?,
        })
    }
}

/// Signed cross-cluster request for a view-change in `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RvcMessage {
    pub target: ClusterId,
    pub round: Round,
    pub v: u64,
    pub sender: ReplicaId,
    pub signature: Signature,
}

impl RvcMessage {
    pub fn signing_bytes(target: ClusterId, round: Round, v: u64, sender: ReplicaId) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(48);
        enc.fixed(b"rvc").cluster(target).round(round).u64(v).replica(sender);
        enc.finish()
    }
}

impl Canonical for RvcMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.cluster(self.target)
            .round(self.round)
            .u64(self.v)
            .replica(self.sender)
            .put(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(RvcMessage {
            target: dec.cluster()?,
            round: dec.round()?,
            v: dec.u64()?,
            sender: dec.replica()?,
            signature: dec.get()?,
        })
    }
}

/// Execution outcome reported to a local client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientResponse {
    pub client: ClientId,
    pub seq: u64,
    pub round: Round,
    pub result: Digest,
    pub responder: ReplicaId,
    /// Responder's current view, a hint for locating the primary.
    pub view: View,
}

impl Canonical for ClientResponse {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.client.0)
            .u64(self.seq)
            .round(self.round)
            .put(&self.result)
            .replica(self.responder)
            .view(self.view);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ClientResponse {
            client: ClientId(dec.fixed()?),
            seq: dec.u64()?,
            round: dec.round()?,
            result: dec.get()?,
            responder: dec.replica()?,
            view: dec.view()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Request,
    PrePrepare,
    Prepare,
    Commit,
    Checkpoint,
    ViewChange,
    NewView,
    GlobalShare,
    Drvc,
    Rvc,
    Response,
}

impl MessageKind {
    pub const ALL: [MessageKind; 11] = [
        MessageKind::Request,
        MessageKind::PrePrepare,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::Checkpoint,
        MessageKind::ViewChange,
        MessageKind::NewView,
        MessageKind::GlobalShare,
        MessageKind::Drvc,
        MessageKind::Rvc,
        MessageKind::Response,
    ];

    /// Forwarded kinds carry signatures; everything else is MAC-authenticated.
    pub const fn auth_class(self) -> AuthClass {
        match self {
            MessageKind::Request
            | MessageKind::Commit
            | MessageKind::Checkpoint
            | MessageKind::GlobalShare
            | MessageKind::Rvc => AuthClass::Signature,
            MessageKind::PrePrepare
            | MessageKind::Prepare
            | MessageKind::ViewChange
            | MessageKind::NewView
            | MessageKind::Drvc
            | MessageKind::Response => AuthClass::Mac,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            MessageKind::Request => "request",
            MessageKind::PrePrepare => "preprepare",
            MessageKind::Prepare => "prepare",
            MessageKind::Commit => "commit",
            MessageKind::Checkpoint => "checkpoint",
            MessageKind::ViewChange => "viewchange",
            MessageKind::NewView => "newview",
            MessageKind::GlobalShare => "share",
            MessageKind::Drvc => "drvc",
            MessageKind::Rvc => "rvc",
            MessageKind::Response => "response",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Request(ClientRequest),
    PrePrepare(PrePrepare),
    Prepare(Prepare),
    Commit(Commit),
    Checkpoint(Checkpoint),
    ViewChange(ViewChange),
    NewView(NewView),
    GlobalShare(GlobalShareMessage),
    Drvc(DrvcMessage),
    Rvc(RvcMessage),
    Response(ClientResponse),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Request(_) => MessageKind::Request,
            Message::PrePrepare(_) => MessageKind::PrePrepare,
            Message::Prepare(_) => MessageKind::Prepare,
            Message::Commit(_) => MessageKind::Commit,
            Message::Checkpoint(_) => MessageKind::Checkpoint,
            Message::ViewChange(_) => MessageKind::ViewChange,
            Message::NewView(_) => MessageKind::NewView,
            Message::GlobalShare(_) => MessageKind::GlobalShare,
            Message::Drvc(_) => MessageKind::Drvc,
            Message::Rvc(_) => MessageKind::Rvc,
            Message::Response(_) => MessageKind::Response,
        }
    }

    pub fn auth_class(&self) -> AuthClass {
        self.kind().auth_class()
    }
}

impl Canonical for Message {
    fn encode(&self, enc: &mut Encoder) {
        let tag = MessageKind::ALL.iter().position(|k| *k == self.kind()).unwrap() as u8;
        enc.u8(tag);
        match self {
            Message::Request(m) => enc.put(m),
            Message::PrePrepare(m) => enc.put(m),
            Message::Prepare(m) => enc.put(m),
            Message::Commit(m) => enc.put(m),
            Message::Checkpoint(m) => enc.put(m),
            Message::ViewChange(m) => enc.put(m),
            Message::NewView(m) => enc.put(m),
            Message::GlobalShare(m) => enc.put(m),
            Message::Drvc(m) => enc.put(m),
            Message::Rvc(m) => enc.put(m),
            Message::Response(m) => enc.put(m),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        let kind = *MessageKind::ALL
            .get(usize::from(tag))
            .ok_or(DecodeError::BadTag { what: "message", tag })?;
        Ok(match kind {
            MessageKind::Request => Message::Request(dec.get()?),
            MessageKind::PrePrepare => Message::PrePrepare(dec.get()?),
            MessageKind::Prepare => Message::Prepare(dec.get()?),
            MessageKind::Commit => Message::Commit(dec.get()?),
            MessageKind::Checkpoint => Message::Checkpoint(dec.get()?),
            MessageKind::ViewChange => Message::ViewChange(dec.get()?),
            MessageKind::NewView => Message::NewView(dec.get()?),
            MessageKind::GlobalShare => Message::GlobalShare(dec.get()?),
            MessageKind::Drvc => Message::Drvc(dec.get()?),
            MessageKind::Rvc => Message::Rvc(dec.get()?),
            MessageKind::Response => Message::Response(dec.get()?),
        })
    }
}

/// A message in flight between two principals.
///
/// MAC-class messages carry a tag over `(from, to, message)`; signature-class
/// messages are authenticated by the signatures they contain.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub from: Principal,
    pub to: Principal,
    pub message: Arc<Message>,
    pub tag: Option<MacTag>,
}

impl Envelope {
    pub fn mac_input(from: Principal, to: Principal, encoded_message: &[u8]) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(encoded_message.len() + 80);
        enc.put(&from).put(&to).fixed(encoded_message);
        enc.finish()
    }

    /// Canonical wire form: sender, receiver, message, optional tag.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.put(&self.from).put(&self.to).put(self.message.as_ref());
        match &self.tag {
            Some(tag) => enc.u8(1).fixed(&tag.0),
            None => enc.u8(0),
        };
        enc.finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let from = dec.get()?;
        let to = dec.get()?;
        let message = Arc::new(dec.get()?);
        let tag = match dec.u8()? {
            0 => None,
            1 => Some(MacTag(dec.fixed()?)),
            tag => return Err(DecodeError::BadTag { what: "tag", tag }),
        };
        dec.finish()?;
        Ok(Envelope { from, to, message, tag })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(signer: ReplicaId, bytes: Vec<u8>) -> Signature {
        Signature {
            signer: Principal::Replica(signer),
            bytes,
        }
    }

    fn arb_replica() -> impl Strategy<Value = ReplicaId> {
        (1u16..8, 1u16..16).prop_map(|(c, l)| ReplicaId::new(c, l))
    }

    fn arb_request() -> impl Strategy<Value = ClientRequest> {
        let client = (
            any::<[u8; 32]>(),
            1u16..8,
            any::<u64>(),
            prop::collection::vec(("[a-z0-9]{0,12}", prop::collection::vec(any::<u8>(), 0..16)), 0..6),
            prop::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(id, c, seq, writes, s)| ClientRequest {
                client: ClientId(id),
                cluster: ClusterId(c),
                seq,
                payload: Payload::new(writes.into_iter().map(|(key, value)| Write { key, value }).collect()),
                auth: RequestAuth::Client(Signature {
                    signer: Principal::Client(ClientId(id)),
                    bytes: s,
                }),
            });
        let noop = (1u16..8, any::<u64>()).prop_map(|(c, r)| ClientRequest::noop(ClusterId(c), Round(r)));
        prop_oneof![client, noop]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            arb_request().prop_map(Message::Request),
            (any::<u64>(), any::<u64>(), 1u16..8, any::<[u8; 32]>(), arb_request()).prop_map(
                |(v, r, c, d, request)| Message::PrePrepare(PrePrepare {
                    view: View(v),
                    round: Round(r),
                    origin_cluster: ClusterId(c),
                    request_digest: Digest(d),
                    request,
                })
            ),
            (any::<u64>(), any::<u64>(), any::<[u8; 32]>(), arb_replica()).prop_map(|(v, r, d, s)| {
                Message::Prepare(Prepare {
                    view: View(v),
                    round: Round(r),
                    request_digest: Digest(d),
                    sender: s,
                })
            }),
            (
                any::<u64>(),
                any::<u64>(),
                any::<[u8; 32]>(),
                arb_replica(),
                prop::collection::vec(any::<u8>(), 0..64)
            )
                .prop_map(|(v, r, d, s, b)| Message::Commit(Commit {
                    view: View(v),
                    round: Round(r),
                    request_digest: Digest(d),
                    sender: s,
                    signature: sig(s, b),
                })),
            (1u16..8, any::<u64>(), any::<u64>(), arb_replica()).prop_map(|(c, r, v, s)| {
                Message::Drvc(DrvcMessage {
                    target: ClusterId(c),
                    round: Round(r),
                    v,
                    sender: s,
                })
            }),
            (
                1u16..8,
                any::<u64>(),
                any::<u64>(),
                arb_replica(),
                prop::collection::vec(any::<u8>(), 0..64)
            )
                .prop_map(|(c, r, v, s, b)| Message::Rvc(RvcMessage {
                    target: ClusterId(c),
                    round: Round(r),
                    v,
                    sender: s,
                    signature: sig(s, b),
                })),
            (
                any::<[u8; 32]>(),
                any::<u64>(),
                any::<u64>(),
                any::<[u8; 32]>(),
                arb_replica(),
                any::<u64>()
            )
                .prop_map(|(c, seq, r, d, s, v)| Message::Response(ClientResponse {
                    client: ClientId(c),
                    seq,
                    round: Round(r),
                    result: Digest(d),
                    responder: s,
                    view: View(v),
                })),
        ]
    }

    proptest! {
        #[test]
        fn envelopes_survive_the_wire(message in arb_message(), tagged in any::<bool>(), tag in any::<[u8; 16]>()) {
            let env = Envelope {
                from: Principal::Replica(ReplicaId::new(1, 2)),
                to: Principal::Replica(ReplicaId::new(2, 1)),
                message: Arc::new(message),
                tag: tagged.then_some(MacTag(tag)),
            };
            let back = Envelope::from_wire(&env.to_wire()).unwrap();
            prop_assert_eq!(back.message.as_ref(), env.message.as_ref());
            prop_assert_eq!(back.tag, env.tag);
            prop_assert_eq!(back.from, env.from);
        }

        #[test]
        fn truncated_wire_never_decodes(message in arb_message(), cut in 1usize..64) {
            let env = Envelope {
                from: Principal::Replica(ReplicaId::new(1, 1)),
                to: Principal::Replica(ReplicaId::new(1, 2)),
                message: Arc::new(message),
                tag: None,
            };
            let wire = env.to_wire();
            let cut = cut.min(wire.len());
            prop_assert!(Envelope::from_wire(&wire[..wire.len() - cut]).is_err());
        }
    }

    #[test]
    fn auth_classes() {
        assert_eq!(MessageKind::Commit.auth_class(), AuthClass::Signature);
        assert_eq!(MessageKind::Rvc.auth_class(), AuthClass::Signature);
        assert_eq!(MessageKind::Request.auth_class(), AuthClass::Signature);
        assert_eq!(MessageKind::Drvc.auth_class(), AuthClass::Mac);
        assert_eq!(MessageKind::Prepare.auth_class(), AuthClass::Mac);
        assert_eq!(MessageKind::PrePrepare.auth_class(), AuthClass::Mac);
    }
}

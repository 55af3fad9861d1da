//! Deterministic keys and message builders for tests.

use std::sync::Arc;

use crate::crypto::{derive_keypair, Crypto, Digest, KeyDirectory, KeyPair, Principal, TestSuite};
use crate::local_replication::CommitCertificate;
use crate::messages::{Checkpoint, Commit, PrePrepare};
use crate::types::{
    ClientId, ClientRequest, ClusterId, Payload, ReplicaId, RequestAuth, Round, SystemConfig, View, Write,
};

/// A configured system with keys for every replica and one client per cluster.
pub struct Fixture {
    pub config: SystemConfig,
    pub crypto: Crypto,
    /// Indexed by [`ReplicaId::global_index`].
    pub keys: Vec<KeyPair>,
    pub clients: Vec<KeyPair>,
}

impl Fixture {
    pub fn new(z: u16, n: u16, f: u16) -> Self {
        let config = SystemConfig::with_shape(z, n, f).expect("valid shape");
        let suite = Arc::new(TestSuite);
        let mut directory = KeyDirectory::new([7; 32]);
        let keys: Vec<KeyPair> = config
            .replicas()
            .map(|id| derive_keypair(suite.as_ref(), config.seed, Principal::Replica(id)))
            .collect();
        let clients: Vec<KeyPair> = ClusterId::all(z)
            .map(|c| derive_keypair(suite.as_ref(), config.seed, Principal::Client(Self::client_id(c))))
            .collect();
        for k in keys.iter().chain(&clients) {
            directory.register(k.owner, k.public.clone());
        }
        Fixture {
            config,
            crypto: Crypto::new(suite, Arc::new(directory)),
            keys,
            clients,
        }
    }

    pub fn client_id(cluster: ClusterId) -> ClientId {
        let mut id = [0u8; 32];
        id[0] = 0xc1;
        id[1..3].copy_from_slice(&cluster.0.to_le_bytes());
        ClientId(id)
    }

    pub fn key(&self, id: ReplicaId) -> &KeyPair {
        &self.keys[id.global_index(self.config.n)]
    }

    /// A signed one-write request from the client of `cluster`.
    pub fn request(&self, cluster: u16, seq: u64) -> ClientRequest {
        let cluster = ClusterId(cluster);
        let client = Self::client_id(cluster);
        let mut request = ClientRequest {
            client,
            cluster,
            seq,
            payload: Payload::new(vec![Write {
                key: format!("k{seq}"),
                value: seq.to_le_bytes().to_vec(),
            }]),
            auth: RequestAuth::Noop { round: Round(0) },
        };
        let sig = self
            .crypto
            .sign(&self.clients[cluster.index()], &request.signing_bytes());
        request.auth = RequestAuth::Client(sig);
        request
    }

    /// A signed COMMIT from replica `local` of cluster 1.
    pub fn commit(&self, local: u16, view: View, round: Round, digest: Digest) -> Commit {
        let sender = ReplicaId::new(1, local);
        let bytes = Commit::signing_bytes(view, round, &digest, sender);
        Commit {
            view,
            round,
            request_digest: digest,
            sender,
            signature: self.crypto.sign(self.key(sender), &bytes),
        }
    }

    pub fn checkpoint(&self, local: u16, round: Round, digest: Digest) -> Checkpoint {
        let sender = ReplicaId::new(1, local);
        let bytes = Checkpoint::signing_bytes(round, &digest, sender);
        Checkpoint {
            round,
            state_digest: digest,
            sender,
            signature: self.crypto.sign(self.key(sender), &bytes),
        }
    }

    /// A view-0 certificate for `request`, signed by the lowest `n - f` replicas of `cluster`.
    pub fn certificate(&self, cluster: u16, round: u64, request: ClientRequest) -> CommitCertificate {
        let (view, round) = (View(0), Round(round));
        let digest = request.digest();
        let commits = (1..=self.config.n - self.config.f)
            .map(|local| {
                let sender = ReplicaId::new(cluster, local);
                Commit {
                    view,
                    round,
                    request_digest: digest,
                    sender,
                    signature: self
                        .crypto
                        .sign(self.key(sender), &Commit::signing_bytes(view, round, &digest, sender)),
                }
            })
            .collect();
        CommitCertificate {
            origin_cluster: ClusterId(cluster),
            round,
            request: request.clone(),
            preprepare: PrePrepare {
                view,
                round,
                origin_cluster: ClusterId(cluster),
                request_digest: digest,
                request,
            },
            commits,
        }
    }
}

//! Identities, configuration and quorum arithmetic shared by every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Deref;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in microseconds.
pub type SimTime = u64;

/// Converts milliseconds to the simulator's microsecond clock.
pub const fn millis(ms: u64) -> SimTime {
    ms * 1_000
}

/// A cluster index, 1-based (`1..=z`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u16);

impl ClusterId {
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_index(index: usize) -> Self {
        ClusterId(index as u16 + 1)
    }

    /// All clusters of a system with `z` clusters, ascending.
    pub fn all(z: u16) -> impl Iterator<Item = ClusterId> {
        (1..=z).map(ClusterId)
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

/// A replica identity: cluster-major, then local index (both 1-based).
///
/// The derived ordering is the total order used everywhere ids are sorted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId {
    pub cluster: ClusterId,
    pub local: u16,
}

impl ReplicaId {
    pub fn new(cluster: u16, local: u16) -> Self {
        ReplicaId {
            cluster: ClusterId(cluster),
            local,
        }
    }

    /// Position of this replica in a flat `z * n` array.
    pub fn global_index(self, n: u16) -> usize {
        self.cluster.index() * usize::from(n) + usize::from(self.local - 1)
    }

    pub fn from_global_index(index: usize, n: u16) -> Self {
        let n = usize::from(n);
        ReplicaId {
            cluster: ClusterId::from_index(index / n),
            local: (index % n) as u16 + 1,
        }
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}.{}", self.cluster.0, self.local)
    }
}

/// A global consensus round. Round 0 is the empty genesis round; real rounds start at 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Round(pub u64);

impl Round {
    pub const GENESIS: Round = Round(0);

    pub fn next(self) -> Round {
        Round(self.0 + 1)
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ρ{}", self.0)
    }
}

/// A local PBFT view number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct View(pub u64);

impl View {
    pub fn next(self) -> View {
        View(self.0 + 1)
    }

    /// Local index of the primary of this view in a group of `n` replicas.
    pub fn primary_local(self, n: u16) -> u16 {
        (self.0 % u64::from(n)) as u16 + 1
    }
}

/// Opaque 32-byte client identifier, bound to a verification key in the key directory.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub [u8; 32]);

impl ClientId {
    pub const NONE: ClientId = ClientId([0; 32]);
}

impl fmt::Debug for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client:{}", hex::encode(&self.0[..6]))
    }
}

/// One keyed write inside a client batch.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Write {
    pub key: String,
    pub value: Vec<u8>,
}

/// The writes of a request. Copies share one allocation and one cached digest.
#[derive(Clone, Default)]
pub struct Payload(Arc<PayloadInner>);

#[derive(Clone, Default)]
struct PayloadInner {
    writes: Vec<Write>,
    write_digests: OnceLock<Vec<crate::crypto::Digest>>,
    digest: OnceLock<crate::crypto::Digest>,
}

impl Payload {
    pub fn new(writes: Vec<Write>) -> Self {
        Payload(Arc::new(PayloadInner {
            writes,
            write_digests: OnceLock::new(),
            digest: OnceLock::new(),
        }))
    }

    /// Mutable access; drops the cached digests.
    pub fn writes_mut(&mut self) -> &mut Vec<Write> {
        let inner = Arc::make_mut(&mut self.0);
        inner.write_digests = OnceLock::new();
        inner.digest = OnceLock::new();
        &mut inner.writes
    }

    /// Digest of each write, in order.
    pub fn write_digests(&self) -> &[crate::crypto::Digest] {
        self.0
            .write_digests
            .get_or_init(|| self.0.writes.iter().map(Write::digest).collect())
    }

    pub(crate) fn cached_digest(
        &self,
        compute: impl FnOnce(&[crate::crypto::Digest]) -> crate::crypto::Digest,
    ) -> crate::crypto::Digest {
        *self.0.digest.get_or_init(|| compute(self.write_digests()))
    }
}

impl From<Vec<Write>> for Payload {
    fn from(writes: Vec<Write>) -> Self {
        Payload::new(writes)
    }
}

impl Deref for Payload {
    type Target = [Write];

    fn deref(&self) -> &[Write] {
        &self.0.writes
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0.writes == other.0.writes
    }
}

impl Eq for Payload {}

impl Hash for Payload {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.writes.hash(state);
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

/// How a request is authenticated.
///
/// No-op requests are identified structurally: they carry the proposing
/// cluster and round instead of a client signature.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RequestAuth {
    Client(crate::crypto::Signature),
    Noop { round: Round },
}

/// A batch of writes signed by a client of `cluster`, or a no-op.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClientRequest {
    pub client: ClientId,
    pub cluster: ClusterId,
    /// Client-local sequence number; `(client, seq)` identifies a request.
    pub seq: u64,
    pub payload: Payload,
    pub auth: RequestAuth,
}

impl ClientRequest {
    pub fn noop(cluster: ClusterId, round: Round) -> Self {
        ClientRequest {
            client: ClientId::NONE,
            cluster,
            seq: 0,
            payload: Payload::default(),
            auth: RequestAuth::Noop { round },
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self.auth, RequestAuth::Noop { .. })
    }

    /// Number of client transactions carried (0 for a no-op).
    pub fn transactions(&self) -> u64 {
        self.payload.len() as u64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("need n > 3f, got n={n} f={f}")]
    TooManyFaults { n: u16, f: u16 },
    #[error("need at least one cluster")]
    NoClusters,
    #[error("batch_size must be at least 1")]
    EmptyBatch,
    #[error("base_timeout must be positive")]
    ZeroTimeout,
    #[error("checkpoint_period must be positive")]
    ZeroCheckpointPeriod,
}

/// System-wide parameters. Construct through [`SystemConfig::new`] or call
/// [`SystemConfig::validate`] after deserializing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of clusters.
    pub z: u16,
    /// Replicas per cluster.
    pub n: u16,
    /// Byzantine replicas tolerated per cluster.
    pub f: u16,
    /// Transactions per client request.
    pub batch_size: u32,
    /// Base timeout in simulated milliseconds.
    pub base_timeout: u64,
    /// Executed transactions between checkpoints.
    pub checkpoint_period: u64,
    pub seed: u64,
    /// Maximum rounds a primary may run ahead of its own execution.
    #[serde(default = "default_pipeline_window")]
    pub pipeline_window: u64,
}

fn default_pipeline_window() -> u64 {
    256
}

impl SystemConfig {
    pub fn new(
        z: u16,
        n: u16,
        f: u16,
        batch_size: u32,
        base_timeout: u64,
        checkpoint_period: u64,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        let config = SystemConfig {
            z,
            n,
            f,
            batch_size,
            base_timeout,
            checkpoint_period,
            seed,
            pipeline_window: default_pipeline_window(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Small valid configuration, handy in tests.
    pub fn with_shape(z: u16, n: u16, f: u16) -> Result<Self, ConfigError> {
        Self::new(z, n, f, 1, 100, 600, 0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.z == 0 {
            return Err(ConfigError::NoClusters);
        }
        if self.n <= 3 * self.f {
            return Err(ConfigError::TooManyFaults { n: self.n, f: self.f });
        }
        if self.batch_size == 0 {
            return Err(ConfigError::EmptyBatch);
        }
        if self.base_timeout == 0 {
            return Err(ConfigError::ZeroTimeout);
        }
        if self.checkpoint_period == 0 {
            return Err(ConfigError::ZeroCheckpointPeriod);
        }
        Ok(())
    }

    pub fn base_timeout_us(&self) -> SimTime {
        millis(self.base_timeout)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        ClusterId::all(self.z).flat_map(move |c| (1..=self.n).map(move |local| ReplicaId { cluster: c, local }))
    }

    pub fn cluster_members(&self, cluster: ClusterId) -> impl Iterator<Item = ReplicaId> {
        (1..=self.n).map(move |local| ReplicaId { cluster, local })
    }

    pub fn total_replicas(&self) -> usize {
        usize::from(self.z) * usize::from(self.n)
    }
}

/// Certificate size and local agreement threshold: `n - f`.
pub fn commit_quorum(config: &SystemConfig) -> usize {
    usize::from(config.n - config.f)
}

/// Smallest set guaranteed to contain a non-faulty replica: `f + 1`.
pub fn weak_quorum(config: &SystemConfig) -> usize {
    usize::from(config.f) + 1
}

/// Failures the whole system tolerates: `f * z`, at most `f` per cluster.
pub fn total_tolerated_failures(config: &SystemConfig) -> usize {
    usize::from(config.f) * usize::from(config.z)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrderingError {
    #[error("round {round} is incomplete: missing request of cluster {missing}")]
    Missing { round: Round, missing: ClusterId },
    #[error("round {round} has two requests for cluster {duplicate}")]
    Duplicate { round: Round, duplicate: ClusterId },
    #[error("round {round} names cluster {cluster}, outside 1..={z}")]
    OutOfRange { round: Round, cluster: ClusterId, z: u16 },
}

/// Orders one complete round: exactly one request per cluster, ascending cluster index.
pub fn execution_order<R, I>(round: Round, z: u16, certified: I) -> Result<Vec<R>, OrderingError>
where
    I: IntoIterator<Item = (ClusterId, R)>,
{
    let mut by_cluster = BTreeMap::new();
    for (cluster, request) in certified {
        if cluster.0 == 0 || cluster.0 > z {
            return Err(OrderingError::OutOfRange { round, cluster, z });
        }
        if by_cluster.insert(cluster, request).is_some() {
            return Err(OrderingError::Duplicate {
                round,
                duplicate: cluster,
            });
        }
    }
    if let Some(missing) = ClusterId::all(z).find(|c| !by_cluster.contains_key(c)) {
        return Err(OrderingError::Missing { round, missing });
    }
    Ok(by_cluster.into_values().collect())
}

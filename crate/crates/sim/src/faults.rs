//! Fault injection.
//!
//! Byzantine behaviours act on the initial primary (local index 1) of the
//! named cluster and are applied as filters on what that replica sends.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use geobft_core::messages::Message;
use geobft_core::types::{ClusterId, ReplicaId, Round, SystemConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FaultSpec {
    /// Drops everything to and from `replica` from `at_ms` on.
    Crash {
        replica: [u16; 2],
        #[serde(default)]
        at_ms: u64,
    },
    /// The primary stops sending preprepares and new-view messages.
    SilencePrimary {
        cluster: u16,
        #[serde(default)]
        at_ms: u64,
    },
    /// The primary certifies but never shares rounds from `from_round` on.
    WithholdGlobalShare {
        cluster: u16,
        #[serde(default = "first_round")]
        from_round: u64,
    },
    /// The primary shares with only `k < f + 1` replicas per cluster.
    PartialGlobalShare { cluster: u16, k: u16 },
    /// Each inter-region replica message is lost with this probability.
    DropGlobal { probability: f64 },
}

fn first_round() -> u64 {
    1
}

#[derive(Debug, Error, PartialEq)]
pub enum FaultError {
    #[error("fault names cluster {0} outside 1..=z")]
    Cluster(u16),
    #[error("fault names replica {0:?} outside the system")]
    Replica([u16; 2]),
    #[error("cluster {cluster} has {faulty} faulty replicas but tolerates only {f}")]
    Budget { cluster: u16, faulty: usize, f: u16 },
    #[error("partial share needs k < f + 1, got k = {0}")]
    PartialK(u16),
    #[error("drop probability must be in [0, 1]")]
    Probability,
}

impl FaultSpec {
    /// The replica this fault makes faulty, if any.
    pub fn faulty_replica(&self) -> Option<ReplicaId> {
        match *self {
            FaultSpec::Crash { replica, .. } => Some(ReplicaId::new(replica[0], replica[1])),
            FaultSpec::SilencePrimary { cluster, .. }
            | FaultSpec::WithholdGlobalShare { cluster, .. }
            | FaultSpec::PartialGlobalShare { cluster, .. } => Some(ReplicaId::new(cluster, 1)),
            FaultSpec::DropGlobal { .. } => None,
        }
    }

    fn check(&self, config: &SystemConfig) -> Result<(), FaultError> {
        let cluster_ok = |c: u16| {
            if (1..=config.z).contains(&c) {
                Ok(())
            } else {
                Err(FaultError::Cluster(c))
            }
        };
        match *self {
            FaultSpec::Crash { replica, .. } => {
                if !(1..=config.z).contains(&replica[0]) || !(1..=config.n).contains(&replica[1]) {
                    return Err(FaultError::Replica(replica));
                }
            }
            FaultSpec::SilencePrimary { cluster, .. } | FaultSpec::WithholdGlobalShare { cluster, .. } => {
                cluster_ok(cluster)?
            }
            FaultSpec::PartialGlobalShare { cluster, k } => {
                cluster_ok(cluster)?;
                if k > config.f {
                    return Err(FaultError::PartialK(k));
                }
            }
            FaultSpec::DropGlobal { probability } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(FaultError::Probability);
                }
            }
        }
        Ok(())
    }
}

/// Checks ranges and the per-cluster budget of `f` faulty replicas.
pub fn validate_faults(faults: &[FaultSpec], config: &SystemConfig) -> Result<(), FaultError> {
    for fault in faults {
        fault.check(config)?;
    }
    let mut per_cluster: BTreeMap<u16, BTreeSet<ReplicaId>> = BTreeMap::new();
    for id in faults.iter().filter_map(FaultSpec::faulty_replica) {
        per_cluster.entry(id.cluster.0).or_default().insert(id);
    }
    for (cluster, ids) in per_cluster {
        if ids.len() > usize::from(config.f) {
            return Err(FaultError::Budget {
                cluster,
                faulty: ids.len(),
                f: config.f,
            });
        }
    }
    Ok(())
}

/// Faults compiled for fast lookup during a run, keyed by physical replica id.
#[derive(Clone, Debug, Default)]
pub struct FaultPlan {
    crash: BTreeMap<ReplicaId, u64>,
    silence: BTreeMap<ReplicaId, u64>,
    withhold: BTreeMap<ReplicaId, Round>,
    partial: BTreeMap<ReplicaId, u16>,
    pub drop_global: f64,
    faulty: BTreeSet<ReplicaId>,
}

impl FaultPlan {
    pub fn new(faults: &[FaultSpec]) -> Self {
        let mut plan = FaultPlan::default();
        for fault in faults {
            if let Some(id) = fault.faulty_replica() {
                plan.faulty.insert(id);
            }
            match *fault {
                FaultSpec::Crash { replica, at_ms } => {
                    plan.crash.insert(ReplicaId::new(replica[0], replica[1]), at_ms * 1000);
                }
                FaultSpec::SilencePrimary { cluster, at_ms } => {
                    plan.silence.insert(ReplicaId::new(cluster, 1), at_ms * 1000);
                }
                FaultSpec::WithholdGlobalShare { cluster, from_round } => {
                    plan.withhold.insert(ReplicaId::new(cluster, 1), Round(from_round));
                }
                FaultSpec::PartialGlobalShare { cluster, k } => {
                    plan.partial.insert(ReplicaId::new(cluster, 1), k);
                }
                FaultSpec::DropGlobal { probability } => plan.drop_global = probability,
            }
        }
        plan
    }

    pub fn is_faulty(&self, id: ReplicaId) -> bool {
        self.faulty.contains(&id)
    }

    pub fn faulty(&self) -> &BTreeSet<ReplicaId> {
        &self.faulty
    }

    pub fn is_crashed(&self, id: ReplicaId, now_us: u64) -> bool {
        self.crash.get(&id).is_some_and(|at| now_us >= *at)
    }

    /// Whether a Byzantine sender suppresses `message` to `to`.
    /// `origin` and `to` are physical ids; `to_region` is the receiver's cluster.
    pub fn suppresses(&self, origin: ReplicaId, to: Option<ReplicaId>, message: &Message, now_us: u64) -> bool {
        if let Some(at) = self.silence.get(&origin) {
            if now_us >= *at && matches!(message, Message::PrePrepare(_) | Message::NewView(_)) {
                return true;
            }
        }
        let Message::GlobalShare(share) = message else {
            return false;
        };
        let to_other_cluster = to.is_some_and(|t| t.cluster != origin.cluster);
        if !to_other_cluster || share.origin_cluster() != origin.cluster {
            return false;
        }
        if let Some(from_round) = self.withhold.get(&origin) {
            if share.round() >= *from_round {
                return true;
            }
        }
        if let Some(k) = self.partial.get(&origin) {
            if to.is_some_and(|t| t.local > *k) {
                return true;
            }
        }
        false
    }

    pub fn withholding_clusters(&self) -> BTreeSet<ClusterId> {
        self.withhold.keys().map(|r| r.cluster).collect()
    }
}

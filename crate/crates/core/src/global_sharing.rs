//! Optimistic inter-cluster sharing of certified requests.
//!
//! The primary of the origin cluster sends each certificate to the `f + 1`
//! lowest-id replicas of every other cluster. A receiver that gets the share
//! straight from the origin cluster rebroadcasts it to its local peers once;
//! copies that arrive from local peers are only buffered.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::crypto::Crypto;
use crate::local_replication::{
    check_certificate_structure, verify_certificate, CertificateRejection, CommitCertificate,
};
use crate::messages::{GlobalShareMessage, Message};
use crate::ordering::{Insert, RoundBuffers};
use crate::types::{weak_quorum, ClusterId, ReplicaId, Round, SystemConfig};

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum SharingError {
    #[error("origin and destination cluster are the same")]
    SameCluster,
    #[error("refusing to share an invalid certificate: {0}")]
    InvalidCertificate(CertificateRejection),
}

/// The `f + 1` lowest-id replicas of `dest`.
pub fn select_targets(
    origin: ClusterId,
    dest: ClusterId,
    config: &SystemConfig,
) -> Result<Vec<ReplicaId>, SharingError> {
    if origin == dest {
        return Err(SharingError::SameCluster);
    }
    Ok((1..=weak_quorum(config) as u16)
        .map(|local| ReplicaId { cluster: dest, local })
        .collect())
}

/// What a receiver did with a share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShareOutcome {
    /// Newly buffered; `forward` lists the local peers to rebroadcast to.
    Buffered { forward: Vec<ReplicaId> },
    /// Already held; `forward` is non-empty on the first direct receipt.
    Duplicate { forward: Vec<ReplicaId> },
    /// The certificate failed verification; nothing changed.
    Rejected(CertificateRejection),
    /// A valid certificate for a different request than the one held.
    Conflict,
}

/// Per-replica sharing bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct GlobalSharing {
    forwarded: BTreeSet<(ClusterId, Round)>,
    shared: BTreeSet<Round>,
    rejected: u64,
}

impl GlobalSharing {
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn has_shared(&self, round: Round) -> bool {
        self.shared.contains(&round)
    }

    /// Forgets what this replica shared, so that it shares again as a new primary.
    pub fn reset_shared(&mut self) {
        self.shared.clear();
    }

    /// Messages sending `cert` to the targets of every other cluster.
    ///
    /// Commit signatures were checked on receipt, so only structure is
    /// re-checked here.
    pub fn send_global(
        &mut self,
        config: &SystemConfig,
        cert: &CommitCertificate,
    ) -> Result<Vec<(ReplicaId, Message)>, SharingError> {
        check_certificate_structure(config, cert).map_err(SharingError::InvalidCertificate)?;
        let msg = Message::GlobalShare(GlobalShareMessage {
            certificate: cert.clone(),
        });
        let mut out = Vec::with_capacity(usize::from(config.z - 1) * weak_quorum(config));
        for dest in ClusterId::all(config.z).filter(|c| *c != cert.origin_cluster) {
            for target in select_targets(cert.origin_cluster, dest, config)? {
                out.push((target, msg.clone()));
            }
        }
        self.shared.insert(cert.round);
        Ok(out)
    }

    /// Handles a share received by `me` from `from`. `held` is the request
    /// digest this replica already holds for the slot (buffered or executed).
    #[allow(clippy::too_many_arguments)]
    pub fn handle_global(
        &mut self,
        config: &SystemConfig,
        crypto: &Crypto,
        me: ReplicaId,
        from: ReplicaId,
        share: &GlobalShareMessage,
        held: Option<crate::crypto::Digest>,
        buffers: &mut RoundBuffers,
    ) -> ShareOutcome {
        let cert = &share.certificate;
        let origin = cert.origin_cluster;
        if origin == me.cluster || origin.0 == 0 || origin.0 > config.z {
            self.rejected += 1;
            return ShareOutcome::Rejected(CertificateRejection::NotMember);
        }
        let identical = held == Some(cert.request_digest());
        if !identical {
            if let Err(reason) = verify_certificate(config, crypto, cert) {
                self.rejected += 1;
                return ShareOutcome::Rejected(reason);
            }
            if held.is_some() {
                return ShareOutcome::Conflict;
            }
        }
        let direct = from.cluster == origin;
        let forward = if direct && self.forwarded.insert((origin, cert.round)) {
            config.cluster_members(me.cluster).filter(|r| *r != me).collect()
        } else {
            Vec::new()
        };
        if identical {
            return ShareOutcome::Duplicate { forward };
        }
        match buffers.insert(cert.clone()) {
            Insert::New => ShareOutcome::Buffered { forward },
            Insert::Duplicate | Insert::Stale => ShareOutcome::Duplicate { forward },
            Insert::Conflict => ShareOutcome::Conflict,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::Fixture;

    fn cert(fx: &Fixture, cluster: u16, round: u64) -> CommitCertificate {
        fx.certificate(cluster, round, fx.request(cluster, round))
    }

    #[test]
    fn targets_are_lowest_ids() {
        let c = SystemConfig::with_shape(2, 4, 1).unwrap();
        assert_eq!(
            select_targets(ClusterId(1), ClusterId(2), &c).unwrap(),
            vec![ReplicaId::new(2, 1), ReplicaId::new(2, 2)]
        );
        assert_eq!(
            select_targets(ClusterId(1), ClusterId(2), &SystemConfig::with_shape(2, 7, 2).unwrap())
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            select_targets(ClusterId(1), ClusterId(2), &SystemConfig::with_shape(2, 13, 4).unwrap())
                .unwrap()
                .len(),
            5
        );
        assert_eq!(
            select_targets(ClusterId(1), ClusterId(1), &c),
            Err(SharingError::SameCluster)
        );
    }

    #[test]
    fn global_send_counts() {
        for (z, n, f, expected) in [(4, 4, 1, 6), (2, 4, 1, 2), (7, 13, 4, 30)] {
            let fx = Fixture::new(z, n, f);
            let out = GlobalSharing::default()
                .send_global(&fx.config, &cert(&fx, 1, 1))
                .unwrap();
            assert_eq!(out.len(), expected, "z={z} f={f}");
            assert!(out.iter().all(|(to, _)| to.cluster != ClusterId(1)));
        }
    }

    #[test]
    fn first_direct_receipt_forwards_once() {
        let fx = Fixture::new(2, 4, 1);
        let share = GlobalShareMessage {
            certificate: cert(&fx, 1, 1),
        };
        let me = ReplicaId::new(2, 1);
        let mut sharing = GlobalSharing::default();
        let mut buffers = RoundBuffers::default();
        let from = ReplicaId::new(1, 1);
        let first = sharing.handle_global(&fx.config, &fx.crypto, me, from, &share, None, &mut buffers);
        assert_eq!(
            first,
            ShareOutcome::Buffered {
                forward: vec![ReplicaId::new(2, 2), ReplicaId::new(2, 3), ReplicaId::new(2, 4)]
            }
        );
        let held = Some(share.certificate.request_digest());
        let again = sharing.handle_global(&fx.config, &fx.crypto, me, from, &share, held, &mut buffers);
        assert_eq!(again, ShareOutcome::Duplicate { forward: vec![] });
    }

    #[test]
    fn local_copy_never_forwards() {
        let fx = Fixture::new(2, 4, 1);
        let share = GlobalShareMessage {
            certificate: cert(&fx, 1, 1),
        };
        let mut buffers = RoundBuffers::default();
        let out = GlobalSharing::default().handle_global(
            &fx.config,
            &fx.crypto,
            ReplicaId::new(2, 3),
            ReplicaId::new(2, 1),
            &share,
            None,
            &mut buffers,
        );
        assert_eq!(out, ShareOutcome::Buffered { forward: vec![] });
    }

    #[test]
    fn tampered_certificate_is_dropped() {
        let fx = Fixture::new(2, 4, 1);
        let mut share = GlobalShareMessage {
            certificate: cert(&fx, 1, 1),
        };
        share.certificate.commits[0].signature.bytes[3] ^= 0x80;
        let mut sharing = GlobalSharing::default();
        let mut buffers = RoundBuffers::default();
        let out = sharing.handle_global(
            &fx.config,
            &fx.crypto,
            ReplicaId::new(2, 1),
            ReplicaId::new(1, 1),
            &share,
            None,
            &mut buffers,
        );
        assert_eq!(out, ShareOutcome::Rejected(CertificateRejection::BadSignature));
        assert!(buffers.get(ClusterId(1), Round(1)).is_none());
        assert_eq!(sharing.rejected(), 1);
    }
}

//! Modeled message sizes and per-replica CPU cost.

use serde::{Deserialize, Serialize};

use geobft_core::crypto::CryptoWork;
use geobft_core::messages::Message;

/// Sizes at a batch of 100 transactions.
pub const PREPREPARE_BYTES: u64 = 5400;
pub const RESPONSE_BYTES: u64 = 1500;
pub const OTHER_BYTES: u64 = 250;
/// A commit inside a certificate: 6.4 KB for a preprepare plus seven commits.
pub const CERTIFIED_COMMIT_BYTES: u64 = 143;

/// Size model: batch-carrying messages scale linearly with the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeModel {
    pub batch_size: u64,
    /// Commits per certificate (`n - f`).
    pub certificate_commits: u64,
}

impl SizeModel {
    pub fn request_bytes(&self) -> u64 {
        (PREPREPARE_BYTES * self.batch_size / 100).max(OTHER_BYTES)
    }

    fn batch_bytes(&self, noop: bool) -> u64 {
        if noop {
            OTHER_BYTES
        } else {
            self.request_bytes()
        }
    }

    fn certificate_bytes(&self, noop: bool) -> u64 {
        self.batch_bytes(noop) + self.certificate_commits * CERTIFIED_COMMIT_BYTES
    }

    pub fn bytes(&self, message: &Message) -> u64 {
        match message {
            Message::Request(r) => self.batch_bytes(r.is_noop()),
            Message::PrePrepare(pp) => self.batch_bytes(pp.request.is_noop()),
            Message::GlobalShare(s) => self.certificate_bytes(s.request().is_noop()),
            Message::Response(_) => (RESPONSE_BYTES * self.batch_size / 100).max(OTHER_BYTES),
            Message::ViewChange(vc) => {
                OTHER_BYTES
                    + vc.certified
                        .iter()
                        .map(|c| self.certificate_bytes(c.request.is_noop()))
                        .sum::<u64>()
                    + vc.prepared
                        .iter()
                        .map(|p| self.batch_bytes(p.preprepare.request.is_noop()))
                        .sum::<u64>()
            }
            Message::NewView(nv) => {
                OTHER_BYTES
                    + nv.preprepares
                        .iter()
                        .map(|pp| self.batch_bytes(pp.request.is_noop()))
                        .sum::<u64>()
            }
            Message::Prepare(_) | Message::Commit(_) | Message::Checkpoint(_) | Message::Drvc(_) | Message::Rvc(_) => {
                OTHER_BYTES
            }
        }
    }
}

/// CPU time charged to a replica per handled input, in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub base_us: f64,
    pub sign_us: f64,
    pub verify_us: f64,
    pub mac_us: f64,
    /// Hashing a full request, per byte of its modeled size.
    pub hash_ns_per_byte: f64,
    pub exec_us_per_txn: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_us: 2.0,
            sign_us: 20.0,
            verify_us: 40.0,
            mac_us: 1.0,
            hash_ns_per_byte: 1.0,
            exec_us_per_txn: 1.0,
        }
    }
}

impl CostModel {
    pub fn charge(&self, work: CryptoWork, request_bytes: u64, executed_txns: u64) -> u64 {
        let us = self.base_us
            + self.sign_us * f64::from(work.signs)
            + self.verify_us * f64::from(work.verifies)
            + self.mac_us * f64::from(work.macs)
            + self.hash_ns_per_byte * request_bytes as f64 * f64::from(work.request_hashes) / 1000.0
            + self.exec_us_per_txn * executed_txns as f64;
        us.round().max(1.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use geobft_core::messages::GlobalShareMessage;
    use geobft_core::testing::Fixture;

    #[test]
    fn sizes_at_batch_100() {
        let fx = Fixture::new(2, 8, 1);
        let model = SizeModel {
            batch_size: 100,
            certificate_commits: 7,
        };
        let cert = fx.certificate(1, 1, fx.request(1, 1));
        assert_eq!(model.bytes(&Message::PrePrepare(cert.preprepare.clone())), 5400);
        // A certificate with seven commits is about 6.4 KB.
        assert_eq!(
            model.bytes(&Message::GlobalShare(GlobalShareMessage { certificate: cert })),
            6401
        );
    }

    #[test]
    fn sizes_scale_with_batch() {
        let model = SizeModel {
            batch_size: 300,
            certificate_commits: 3,
        };
        assert_eq!(model.request_bytes(), 16_200);
    }

    #[test]
    fn charge_counts_operations() {
        let model = CostModel::default();
        let work = CryptoWork {
            signs: 1,
            verifies: 2,
            macs: 3,
            request_hashes: 1,
        };
        assert_eq!(
            model.charge(work, 5400, 100),
            (2.0 + 20.0 + 80.0 + 3.0 + 5.4 + 100.0_f64).round() as u64
        );
        assert_eq!(model.charge(CryptoWork::default(), 0, 0), 2);
    }
}

//! Inter-region round-trip times and bandwidth.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use geobft_core::types::SimTime;

/// Region names of the measured deployment, in matrix order.
pub const MEASURED_REGIONS: [&str; 6] = ["oregon", "iowa", "montreal", "belgium", "taiwan", "sydney"];

/// Ping round-trip times in milliseconds; the diagonal holds the `<= 1` entries.
pub const MEASURED_RTT_MS: [[f64; 6]; 6] = [
    [1.0, 38.0, 65.0, 136.0, 118.0, 161.0],
    [38.0, 1.0, 33.0, 98.0, 153.0, 172.0],
    [65.0, 33.0, 1.0, 82.0, 186.0, 202.0],
    [136.0, 98.0, 82.0, 1.0, 252.0, 270.0],
    [118.0, 153.0, 186.0, 252.0, 1.0, 137.0],
    [161.0, 172.0, 202.0, 270.0, 137.0, 1.0],
];

/// Bandwidth in Mbit/s, symmetrized from the measured upper triangle.
pub const MEASURED_BANDWIDTH_MBPS: [[f64; 6]; 6] = [
    [7998.0, 669.0, 371.0, 194.0, 188.0, 136.0],
    [669.0, 10004.0, 752.0, 243.0, 144.0, 120.0],
    [371.0, 752.0, 7977.0, 283.0, 111.0, 102.0],
    [194.0, 243.0, 283.0, 9728.0, 79.0, 66.0],
    [188.0, 144.0, 111.0, 79.0, 7998.0, 160.0],
    [136.0, 120.0, 102.0, 66.0, 160.0, 7977.0],
];

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
    #[error("matrix must be {expected}x{expected}")]
    Shape { expected: usize },
    #[error("matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("negative or non-finite entry at ({0}, {1})")]
    BadEntry(usize, usize),
    #[error("diagonal entry {0} exceeds twice the intra-cluster delay")]
    Diagonal(usize),
    #[error("bandwidth must be positive at ({0}, {1})")]
    Bandwidth(usize, usize),
}

/// Round-trip times and bandwidth between regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    pub regions: Vec<String>,
    pub rtt_ms: Vec<Vec<f64>>,
    pub bandwidth_mbps: Vec<Vec<f64>>,
    /// One-way delay between replicas of the same region.
    pub intra_ms: f64,
    /// Maximum jitter as a percentage of the inter-region one-way delay.
    pub jitter_pct: f64,
}

impl LatencyMatrix {
    /// The measured matrix restricted to `regions`, in the given order.
    pub fn measured(regions: &[&str], intra_ms: f64, jitter_pct: f64) -> Result<Self, LatencyError> {
        let index: Vec<usize> = regions
            .iter()
            .map(|r| {
                MEASURED_REGIONS
                    .iter()
                    .position(|t| t.eq_ignore_ascii_case(r))
                    .ok_or_else(|| LatencyError::UnknownRegion(r.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let pick = |m: &[[f64; 6]; 6]| -> Vec<Vec<f64>> {
            index
                .iter()
                .map(|&i| index.iter().map(|&j| m[i][j]).collect())
                .collect()
        };
        let matrix = LatencyMatrix {
            regions: index.iter().map(|&i| MEASURED_REGIONS[i].to_string()).collect(),
            rtt_ms: pick(&MEASURED_RTT_MS),
            bandwidth_mbps: pick(&MEASURED_BANDWIDTH_MBPS),
            intra_ms,
            jitter_pct,
        };
        matrix.validate()?;
        Ok(matrix)
    }

    /// The first `z` measured regions.
    pub fn measured_first(z: usize, intra_ms: f64, jitter_pct: f64) -> Result<Self, LatencyError> {
        if z > MEASURED_REGIONS.len() {
            return Err(LatencyError::Shape {
                expected: MEASURED_REGIONS.len(),
            });
        }
        Self::measured(&MEASURED_REGIONS[..z], intra_ms, jitter_pct)
    }

    /// Every region `rtt_ms` apart with uniform bandwidth.
    pub fn uniform(z: usize, rtt_ms: f64, bandwidth_mbps: f64, intra_ms: f64, jitter_pct: f64) -> Self {
        LatencyMatrix {
            regions: (1..=z).map(|i| format!("region{i}")).collect(),
            rtt_ms: (0..z)
                .map(|i| (0..z).map(|j| if i == j { 2.0 * intra_ms } else { rtt_ms }).collect())
                .collect(),
            bandwidth_mbps: vec![vec![bandwidth_mbps; z]; z],
            intra_ms,
            jitter_pct,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let z = self.regions.len();
        for m in [&self.rtt_ms, &self.bandwidth_mbps] {
            if m.len() != z || m.iter().any(|row| row.len() != z) {
                return Err(LatencyError::Shape { expected: z });
            }
        }
        for i in 0..z {
            for j in 0..z {
                let (rtt, bw) = (self.rtt_ms[i][j], self.bandwidth_mbps[i][j]);
                if !rtt.is_finite() || rtt < 0.0 {
                    return Err(LatencyError::BadEntry(i, j));
                }
                if rtt != self.rtt_ms[j][i] {
                    return Err(LatencyError::Asymmetric(i, j));
                }
                if !bw.is_finite() || bw <= 0.0 {
                    return Err(LatencyError::Bandwidth(i, j));
                }
            }
            if self.rtt_ms[i][i] > 2.0 * self.intra_ms.max(0.5) {
                return Err(LatencyError::Diagonal(i));
            }
        }
        if !self.intra_ms.is_finite() || self.intra_ms < 0.0 || !self.jitter_pct.is_finite() || self.jitter_pct < 0.0 {
            return Err(LatencyError::BadEntry(0, 0));
        }
        Ok(())
    }

    /// One-way propagation delay without jitter, in microseconds.
    pub fn base_delay_us(&self, from: usize, to: usize) -> SimTime {
        if from == to {
            ms_to_us(self.intra_ms)
        } else {
            ms_to_us(self.rtt_ms[from][to] / 2.0)
        }
    }

    /// One-way delay with seeded jitter in `[0, jitter_pct% of base]` between regions.
    pub fn deliver_delay_us(&self, from: usize, to: usize, rng: &mut impl Rng) -> SimTime {
        let base = self.base_delay_us(from, to);
        if from == to || self.jitter_pct == 0.0 {
            return base;
        }
        let max = (base as f64 * self.jitter_pct / 100.0).round() as u64;
        if max == 0 {
            base
        } else {
            base + rng.gen_range(0..=max)
        }
    }

    /// Time to put `bytes` on the link between two regions, in microseconds.
    pub fn serialization_us(&self, from: usize, to: usize, bytes: u64) -> SimTime {
        let bits = bytes as f64 * 8.0;
        (bits / self.bandwidth_mbps[from][to]).ceil() as SimTime
    }
}

pub fn ms_to_us(ms: f64) -> SimTime {
    (ms * 1000.0).round() as SimTime
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn measured_delays() {
        let m = LatencyMatrix::measured_first(6, 0.5, 0.0).unwrap();
        assert_eq!(m.base_delay_us(0, 1), 19_000);
        assert_eq!(m.base_delay_us(3, 5), 135_000);
        assert_eq!(m.base_delay_us(2, 2), 500);
    }

    #[test]
    fn subset_keeps_requested_order() {
        let m = LatencyMatrix::measured(&["belgium", "oregon"], 0.5, 0.0).unwrap();
        assert_eq!(m.rtt_ms[0][1], 136.0);
        assert_eq!(m.bandwidth_mbps[1][0], 194.0);
        assert_eq!(
            LatencyMatrix::measured(&["mars"], 0.5, 0.0),
            Err(LatencyError::UnknownRegion("mars".into()))
        );
    }

    #[test]
    fn jitter_stays_in_range() {
        let m = LatencyMatrix::measured_first(4, 0.5, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let d = m.deliver_delay_us(0, 1, &mut rng);
            assert!((19_000..=20_900).contains(&d));
            assert_eq!(m.deliver_delay_us(1, 1, &mut rng), 500);
        }
    }

    #[test]
    fn serialization_uses_bandwidth() {
        let m = LatencyMatrix::measured_first(4, 0.5, 0.0).unwrap();
        // 5400 bytes at 194 Mbit/s.
        assert_eq!(m.serialization_us(0, 3, 5400), 223);
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let mut m = LatencyMatrix::uniform(2, 50.0, 100.0, 0.5, 0.0);
        m.rtt_ms[0][1] = 40.0;
        assert_eq!(m.validate(), Err(LatencyError::Asymmetric(0, 1)));
    }
}

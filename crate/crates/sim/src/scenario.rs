//! Scenario files.
//!
//! ```toml
//! [system]
//! z = 2
//! n = 4
//! f = 1
//! batch_size = 10
//! base_timeout = 500
//! checkpoint_period = 600
//! seed = 1
//!
//! [latency]
//! preset = "measured"
//! intra_ms = 0.5
//! jitter_pct = 10
//!
//! [workload]
//! batches = 20
//! clients = 2
//! depth = 4
//!
//! [mode]
//! protocol = "geobft"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use geobft_core::types::{ConfigError, SystemConfig};

use crate::cost::CostModel;
use crate::faults::{validate_faults, FaultError, FaultSpec};
use crate::latency::{LatencyError, LatencyMatrix};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid [system]: {0}")]
    System(#[from] ConfigError),
    #[error("invalid [latency]: {0}")]
    Latency(#[from] LatencyError),
    #[error("latency matrix has {regions} regions but the system has {z} clusters")]
    RegionCount { regions: usize, z: u16 },
    #[error("unknown latency preset {0:?}")]
    Preset(String),
    #[error("[latency] needs regions, rtt_ms and bandwidth_mbps when no preset is given")]
    MissingMatrix,
    #[error("invalid [faults]: {0}")]
    Faults(#[from] FaultError),
    #[error("invalid [workload]: {0}")]
    Workload(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Geobft,
    /// One PBFT instance over all `z * n` replicas, primary in the first region.
    FlatPbft,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Geobft => "geobft",
            Protocol::FlatPbft => "flat-pbft",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geobft" => Ok(Protocol::Geobft),
            "flat-pbft" => Ok(Protocol::FlatPbft),
            other => Err(format!("unknown mode {other:?}; expected geobft or flat-pbft")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CryptoChoice {
    /// Keyed hashing; fast and byte-reproducible.
    #[default]
    Test,
    /// Ed25519 signatures and AES-CMAC.
    Production,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSection {
    pub protocol: Protocol,
    pub crypto: CryptoChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    /// `measured` (measured regions) or `uniform`. Without a preset, an explicit
    /// matrix is used when given and `measured` otherwise.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub regions: Option<Vec<String>>,
    #[serde(default)]
    pub rtt_ms: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub bandwidth_mbps: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_intra_ms")]
    pub intra_ms: f64,
    #[serde(default = "default_jitter_pct")]
    pub jitter_pct: f64,
    /// Round-trip time between distinct regions of the `uniform` preset.
    #[serde(default = "default_uniform_rtt")]
    pub uniform_rtt_ms: f64,
    #[serde(default = "default_uniform_bandwidth")]
    pub uniform_bandwidth_mbps: f64,
}

fn default_intra_ms() -> f64 {
    0.5
}

fn default_jitter_pct() -> f64 {
    10.0
}

fn default_uniform_rtt() -> f64 {
    50.0
}

fn default_uniform_bandwidth() -> f64 {
    1000.0
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            preset: Some("measured".into()),
            regions: None,
            rtt_ms: None,
            bandwidth_mbps: None,
            intra_ms: default_intra_ms(),
            jitter_pct: default_jitter_pct(),
            uniform_rtt_ms: default_uniform_rtt(),
            uniform_bandwidth_mbps: default_uniform_bandwidth(),
        }
    }
}

impl LatencySection {
    pub fn build(&self, z: u16) -> Result<LatencyMatrix, ScenarioError> {
        let z = usize::from(z);
        let explicit = self.rtt_ms.is_some() || self.bandwidth_mbps.is_some();
        let preset = self.preset.as_deref().or((!explicit).then_some("measured"));
        let matrix = match preset {
            Some("measured") => match &self.regions {
                Some(regions) => {
                    let names: Vec<&str> = regions.iter().map(String::as_str).collect();
                    LatencyMatrix::measured(&names, self.intra_ms, self.jitter_pct)?
                }
                None => LatencyMatrix::measured_first(z, self.intra_ms, self.jitter_pct)?,
            },
            Some("uniform") => LatencyMatrix::uniform(
                z,
                self.uniform_rtt_ms,
                self.uniform_bandwidth_mbps,
                self.intra_ms,
                self.jitter_pct,
            ),
            Some(other) => return Err(ScenarioError::Preset(other.to_string())),
            None => {
                let (Some(regions), Some(rtt), Some(bw)) = (&self.regions, &self.rtt_ms, &self.bandwidth_mbps) else {
                    return Err(ScenarioError::MissingMatrix);
                };
                LatencyMatrix {
                    regions: regions.clone(),
                    rtt_ms: rtt.clone(),
                    bandwidth_mbps: bw.clone(),
                    intra_ms: self.intra_ms,
                    jitter_pct: self.jitter_pct,
                }
            }
        };
        matrix.validate()?;
        if matrix.len() != z {
            return Err(ScenarioError::RegionCount {
                regions: matrix.len(),
                z: z as u16,
            });
        }
        Ok(matrix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    /// Client requests (batches) issued per cluster.
    pub batches: u64,
    /// Closed-loop clients per cluster.
    #[serde(default = "one")]
    pub clients: u32,
    /// Outstanding requests per client.
    #[serde(default = "one")]
    pub depth: u32,
    /// Client retransmission timeout in milliseconds; defaults to 4x the base timeout.
    #[serde(default)]
    pub client_timeout: Option<u64>,
    #[serde(default = "default_keyspace")]
    pub keyspace: u64,
}

fn one() -> u32 {
    1
}

fn default_keyspace() -> u64 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Simulated-time cap in milliseconds.
    pub time_cap_ms: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { time_cap_ms: 600_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemConfig,
    #[serde(default)]
    pub latency: LatencySection,
    pub workload: Workload,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub mode: ModeSection,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub run: RunSection,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.system.validate()?;
        self.latency.build(self.system.z)?;
        validate_faults(&self.faults, &self.system)?;
        if self.workload.batches == 0 {
            return Err(ScenarioError::Workload("batches must be positive"));
        }
        if self.workload.clients == 0 || self.workload.depth == 0 {
            return Err(ScenarioError::Workload("clients and depth must be positive"));
        }
        if self.workload.keyspace == 0 {
            return Err(ScenarioError::Workload("keyspace must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn client_timeout_ms(&self) -> u64 {
        self.workload.client_timeout.unwrap_or(4 * self.system.base_timeout)
    }

    /// Hash of the sections two runs must share to be compared: system
    /// (without the seed), latency and workload.
    pub fn comparison_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            system: SystemConfig,
            latency: &'a LatencySection,
            workload: &'a Workload,
        }
        let mut system = self.system.clone();
        system.seed = 0;
        let text = toml::to_string(&Key {
            system,
            latency: &self.latency,
            workload: &self.workload,
        })
        .expect("serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut s = self.clone();
        s.system.seed = seed;
        s
    }
}

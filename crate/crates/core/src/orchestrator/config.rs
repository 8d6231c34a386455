use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::aggregation::DefensePolicy;
use crate::chain::{BlockCutPolicy, NodeId, BLOCK_OVERHEAD_BYTES, RECORD_BYTES};
use crate::error::{Error, Result};
use crate::model::{generate_synthetic_dataset, param_dim, Dataset, SyntheticSpec, TrainConfig};
use crate::netsim::{DdosConfig, LinkParams, PayloadSizes};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Bus,
    Rsu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub id: NodeId,
    pub role: Role,
    /// Simulated seconds of training per epoch per 1000 samples.
    pub compute_time_multiplier: f64,
    /// Local dataset size before the test holdout.
    pub samples: usize,
    pub link: LinkParams,
    /// RSU whose database replica a bus uploads to and downloads from under
    /// ledger strategies. `None` assigns RSUs round-robin in bus order.
    pub nearby_rsu: Option<NodeId>,
}

impl NodeConfig {
    pub fn rsu(id: NodeId) -> Self {
        NodeConfig {
            id,
            role: Role::Rsu,
            compute_time_multiplier: 1.0,
            samples: 1500,
            link: LinkParams::default(),
            nearby_rsu: None,
        }
    }

    pub fn bus(id: NodeId) -> Self {
        NodeConfig {
            id,
            role: Role::Bus,
            compute_time_multiplier: 4.0,
            ..NodeConfig::rsu(id)
        }
    }
}

/// How local models are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Asynchronous, accuracy-weighted, ledger-backed with a rotating leader.
    Dbafl,
    /// Synchronous rounds over the same ledger and committee, unit weights.
    Bsfl,
    /// Synchronous sample-weighted averaging on a fixed server, no ledger.
    FedAvg,
    /// Dbafl with a fixed scaling factor instead of the accuracy ratio.
    StaticEps(f64),
    /// Every node trains alone.
    LocalOnly,
    /// Classic asynchronous FL: fixed server, no ledger, unit weights.
    Afl,
}

impl Strategy {
    pub fn uses_ledger(&self) -> bool {
        matches!(self, Strategy::Dbafl | Strategy::Bsfl | Strategy::StaticEps(_))
    }

    pub fn is_synchronous(&self) -> bool {
        matches!(self, Strategy::Bsfl | Strategy::FedAvg)
    }

    pub fn communicates(&self) -> bool {
        !matches!(self, Strategy::LocalOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Dbafl => f.write_str("dbafl"),
            Strategy::Bsfl => f.write_str("bsfl"),
            Strategy::FedAvg => f.write_str("fedavg"),
            Strategy::StaticEps(e) => write!(f, "static:{e}"),
            Strategy::LocalOnly => f.write_str("local"),
            Strategy::Afl => f.write_str("afl"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let strategy = match lower.as_str() {
            "dbafl" => Strategy::Dbafl,
            "bsfl" => Strategy::Bsfl,
            "fedavg" => Strategy::FedAvg,
            "local" | "localonly" => Strategy::LocalOnly,
            "afl" => Strategy::Afl,
            other => {
                let eps = other
                    .strip_prefix("static:")
                    .and_then(|e| e.parse::<f64>().ok())
                    .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))?;
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::config("strategy", "static scaling factor must be positive"));
                }
                Strategy::StaticEps(eps)
            }
        };
        Ok(strategy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Nodes that add uniform noise to every model they upload.
    pub poisoners: BTreeSet<NodeId>,
    pub poison_magnitude: f64,
    pub ddos: DdosConfig,
    pub defense: DefensePolicy,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            poisoners: BTreeSet::new(),
            poison_magnitude: 10.0,
            ddos: DdosConfig::default(),
            defense: DefensePolicy::Off,
        }
    }
}

/// Shape of the synthetic data shared out across nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub anisotropy: f64,
    /// Fraction of each node's samples held out for accuracy tests.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            features: 10,
            classes: 4,
            separation: 4.0,
            anisotropy: 4.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadConfig {
    /// Model size on the wire. `None` uses the serialized parameter vector,
    /// 64 bits per parameter.
    pub model_bits: Option<f64>,
    pub hash_bits: f64,
}

impl Default for PayloadConfig {
    fn default() -> Self {
        PayloadConfig {
            model_bits: None,
            hash_bits: 256.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub nodes: Vec<NodeConfig>,
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub chain_policy: BlockCutPolicy,
    pub term_blocks: u32,
    pub payload: PayloadConfig,
    pub attack: AttackConfig,
    pub duration_s: f64,
    pub master_seed: u64,
    pub metrics_interval_s: f64,
}

impl Default for ScenarioConfig {
    /// Five nodes (three RSUs, two buses at four times the RSU training cost)
    /// with the reference hyper-parameters: `E = 50`, `η = 0.01`, `B = 1500`,
    /// 2 s / 10 records / 10 MiB block cuts.
    fn default() -> Self {
        ScenarioConfig {
            nodes: default_nodes(),
            strategy: Strategy::Dbafl,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            chain_policy: BlockCutPolicy::default(),
            term_blocks: 10,
            payload: PayloadConfig::default(),
            attack: AttackConfig::default(),
            duration_s: 1200.0,
            master_seed: 0,
            metrics_interval_s: 1.0,
        }
    }
}

pub(crate) fn default_nodes() -> Vec<NodeConfig> {
    vec![
        NodeConfig::rsu(0),
        NodeConfig::rsu(1),
        NodeConfig::rsu(2),
        NodeConfig::bus(3),
        NodeConfig::bus(4),
    ]
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::config("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id) {
                return Err(Error::config("nodes", format!("duplicate node id {}", node.id)));
            }
            if !(node.compute_time_multiplier >= 1.0 && node.compute_time_multiplier.is_finite()) {
                return Err(Error::config("nodes.compute_time_multiplier", "must be at least 1"));
            }
            if node.samples < 2 {
                return Err(Error::config("nodes.samples", "each node needs at least two samples"));
            }
            node.link.validate()?;
        }
        let rsus = self.rsu_ids();
        if self.strategy.communicates() && rsus.is_empty() {
            return Err(Error::config(
                "nodes",
                format!("strategy `{}` needs at least one RSU", self.strategy),
            ));
        }
        for node in &self.nodes {
            if let Some(near) = node.nearby_rsu {
                if node.role != Role::Bus || !rsus.contains(&near) {
                    return Err(Error::config(
                        "nodes.nearby_rsu",
                        format!("node {} must be a bus pointing at an RSU", node.id),
                    ));
                }
            }
        }
        if let Strategy::StaticEps(e) = self.strategy {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::config("static_epsilon", "must be positive"));
            }
        }
        self.train.validate()?;
        if self.data.features == 0 {
            return Err(Error::config("data.features", "must be at least 1"));
        }
        if self.data.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if !(self.data.separation >= 0.0 && self.data.separation.is_finite()) {
            return Err(Error::config("data.separation", "must be non-negative"));
        }
        if !(self.data.anisotropy >= 1.0 && self.data.anisotropy.is_finite()) {
            return Err(Error::config("data.anisotropy", "must be at least 1"));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        self.chain_policy.validate()?;
        if self.term_blocks == 0 {
            return Err(Error::config("term_blocks", "must be positive"));
        }
        if let Some(bits) = self.payload.model_bits {
            if !(bits > 0.0 && bits.is_finite()) {
                return Err(Error::config("payload.model_bits", "must be positive"));
            }
        }
        self.payload_sizes().validate()?;
        if let Some(bad) = self.attack.poisoners.iter().find(|p| !ids.contains(p)) {
            return Err(Error::config("attack.poisoners", format!("unknown node {bad}")));
        }
        if !(self.attack.poison_magnitude > 0.0 && self.attack.poison_magnitude.is_finite()) {
            return Err(Error::config("attack.poison_magnitude", "must be positive"));
        }
        self.attack.ddos.validate()?;
        if let DefensePolicy::ThresholdFraction(t) = self.attack.defense {
            DefensePolicy::threshold(t)?;
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::config("duration_s", "must be positive"));
        }
        if !(self.metrics_interval_s > 0.0 && self.metrics_interval_s.is_finite()) {
            return Err(Error::config("metrics_interval_s", "must be positive"));
        }
        Ok(())
    }

    pub fn rsu_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.role == Role::Rsu)
            .map(|n| n.id)
            .collect()
    }

    pub fn model_dim(&self) -> usize {
        param_dim(self.data.features, self.data.classes)
    }

    /// Wire sizes: model from the override or `d × 64` bits, a full block of
    /// `max_records` records from the canonical encoding.
    pub fn payload_sizes(&self) -> PayloadSizes {
        let full_block_bytes = BLOCK_OVERHEAD_BYTES + self.chain_policy.max_records * RECORD_BYTES;
        PayloadSizes {
            model_bits: self.payload.model_bits.unwrap_or((self.model_dim() * 64) as f64),
            hash_bits: self.payload.hash_bits,
            block_bits: (full_block_bytes * 8) as f64,
        }
    }

    /// Generates the scenario dataset and returns each node's
    /// `(train, test)` split, in node order. Shards are disjoint.
    pub fn node_datasets(&self) -> Result<Vec<(Dataset, Dataset)>> {
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.samples).collect();
        let total: usize = sizes.iter().sum();
        let spec = SyntheticSpec {
            samples: total,
            features: self.data.features,
            classes: self.data.classes,
            separation: self.data.separation,
            anisotropy: self.data.anisotropy,
        };
        let all = generate_synthetic_dataset(seed::derive(self.master_seed, Purpose::Data, 0, 0), &spec)?;
        all.partition(&sizes)?
            .iter()
            .map(|shard| shard.split_holdout(self.data.test_fraction))
            .collect()
    }
}

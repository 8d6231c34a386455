//! Scenario files, batch runs and chain audits.
//!
//! Scenarios are TOML. Every key is optional; omitted keys take the defaults
//! of [`ScenarioConfig::default`]. A minimal file overriding two values:
//!
//! ```toml
//! strategy = "fedavg"
//! duration_s = 600.0
//!
//! [attack]
//! poisoners = [4]
//! defense_theta = 0.9
//! ```
//!
//! A run writes `metrics_<strategy>_seed<N>.csv` and
//! `chain_<strategy>_seed<N>.txt` per strategy and seed.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::DefensePolicy;
use crate::chain::{AuditOutcome, BlockCutPolicy, Chain};
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::netsim::{snr_from_db, DdosConfig, LinkParams};
use crate::orchestrator::{
    run_scenario, AttackConfig, DataConfig, MetricsRow, NodeConfig, PayloadConfig, Role, RunOutput, ScenarioConfig,
    Strategy,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse(_) => EXIT_CONFIG,
        Error::Format { .. } => EXIT_AUDIT,
        _ => EXIT_RUNTIME,
    }
}

pub const METRICS_HEADER: [&str; 11] = [
    "sim_time_s",
    "avg_test_accuracy",
    "global_objective",
    "t_training",
    "t_testing",
    "t_communication",
    "t_waiting",
    "blocks_appended",
    "current_leader",
    "strategy",
    "seed",
];

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    strategy: Option<String>,
    static_epsilon: Option<f64>,
    duration_s: Option<f64>,
    master_seed: Option<u64>,
    metrics_interval_s: Option<f64>,
    term_blocks: Option<u32>,
    train: Option<TrainFile>,
    data: Option<DataFile>,
    chain: Option<ChainFile>,
    payload: Option<PayloadFile>,
    attack: Option<AttackFile>,
    nodes: Option<Vec<NodeFile>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<u32>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFile {
    features: Option<usize>,
    classes: Option<usize>,
    separation: Option<f64>,
    anisotropy: Option<f64>,
    test_fraction: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    max_wait_s: Option<f64>,
    max_records: Option<usize>,
    max_block_bytes: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayloadFile {
    model_bits: Option<f64>,
    hash_bits: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackFile {
    poisoners: Option<Vec<u32>>,
    poison_magnitude: Option<f64>,
    defense_theta: Option<f64>,
    ddos_fraction: Option<f64>,
    ddos_lag_terms: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: u32,
    role: String,
    compute_time_multiplier: Option<f64>,
    samples: Option<usize>,
    nearby_rsu: Option<u32>,
    mobile_bandwidth_hz: Option<f64>,
    mobile_snr: Option<f64>,
    mobile_snr_db: Option<f64>,
    ethernet_rate_bps: Option<f64>,
}

fn role_from_str(s: &str) -> Result<Role> {
    match s.to_ascii_lowercase().as_str() {
        "bus" => Ok(Role::Bus),
        "rsu" => Ok(Role::Rsu),
        other => Err(Error::config(
            "nodes.role",
            format!("expected `bus` or `rsu`, got `{other}`"),
        )),
    }
}

impl NodeFile {
    fn into_config(self) -> Result<NodeConfig> {
        let role = role_from_str(&self.role)?;
        let base = match role {
            Role::Bus => NodeConfig::bus(self.id),
            Role::Rsu => NodeConfig::rsu(self.id),
        };
        let mobile_snr = match (self.mobile_snr, self.mobile_snr_db) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "nodes.mobile_snr_db",
                    "give either mobile_snr or mobile_snr_db, not both",
                ))
            }
            (Some(lin), None) => lin,
            (None, Some(db)) => snr_from_db(db),
            (None, None) => base.link.mobile_snr,
        };
        Ok(NodeConfig {
            compute_time_multiplier: self.compute_time_multiplier.unwrap_or(base.compute_time_multiplier),
            samples: self.samples.unwrap_or(base.samples),
            nearby_rsu: self.nearby_rsu,
            link: LinkParams {
                mobile_bandwidth_hz: self.mobile_bandwidth_hz.unwrap_or(base.link.mobile_bandwidth_hz),
                mobile_snr,
                ethernet_rate_bps: self.ethernet_rate_bps.unwrap_or(base.link.ethernet_rate_bps),
            },
            ..base
        })
    }

    fn from_config(n: &NodeConfig) -> Self {
        NodeFile {
            id: n.id,
            role: match n.role {
                Role::Bus => "bus".into(),
                Role::Rsu => "rsu".into(),
            },
            compute_time_multiplier: Some(n.compute_time_multiplier),
            samples: Some(n.samples),
            nearby_rsu: n.nearby_rsu,
            mobile_bandwidth_hz: Some(n.link.mobile_bandwidth_hz),
            mobile_snr: Some(n.link.mobile_snr),
            mobile_snr_db: None,
            ethernet_rate_bps: Some(n.link.ethernet_rate_bps),
        }
    }
}

impl ScenarioFile {
    fn into_config(self) -> Result<ScenarioConfig> {
        let d = ScenarioConfig::default();
        let strategy = match (self.strategy, self.static_epsilon) {
            (_, Some(eps)) => Strategy::StaticEps(eps),
            (Some(s), None) => s.parse()?,
            (None, None) => d.strategy,
        };
        let train = self.train.unwrap_or_default();
        let data = self.data.unwrap_or_default();
        let chain = self.chain.unwrap_or_default();
        let payload = self.payload.unwrap_or_default();
        let attack = self.attack.unwrap_or_default();
        let nodes = match self.nodes {
            None => d.nodes,
            Some(list) => list.into_iter().map(NodeFile::into_config).collect::<Result<_>>()?,
        };
        let defense = match attack.defense_theta {
            Some(theta) => DefensePolicy::threshold(theta)?,
            None => d.attack.defense,
        };
        let cfg = ScenarioConfig {
            nodes,
            strategy,
            train: TrainConfig {
                epochs: train.epochs.unwrap_or(d.train.epochs),
                learning_rate: train.learning_rate.unwrap_or(d.train.learning_rate),
                batch_size: train.batch_size.unwrap_or(d.train.batch_size),
            },
            data: DataConfig {
                features: data.features.unwrap_or(d.data.features),
                classes: data.classes.unwrap_or(d.data.classes),
                separation: data.separation.unwrap_or(d.data.separation),
                anisotropy: data.anisotropy.unwrap_or(d.data.anisotropy),
                test_fraction: data.test_fraction.unwrap_or(d.data.test_fraction),
            },
            chain_policy: BlockCutPolicy {
                max_wait_s: chain.max_wait_s.unwrap_or(d.chain_policy.max_wait_s),
                max_records: chain.max_records.unwrap_or(d.chain_policy.max_records),
                max_block_bytes: chain.max_block_bytes.unwrap_or(d.chain_policy.max_block_bytes),
            },
            term_blocks: self.term_blocks.unwrap_or(d.term_blocks),
            payload: PayloadConfig {
                model_bits: payload.model_bits.or(d.payload.model_bits),
                hash_bits: payload.hash_bits.unwrap_or(d.payload.hash_bits),
            },
            attack: AttackConfig {
                poisoners: attack
                    .poisoners
                    .map(|p| p.into_iter().collect())
                    .unwrap_or(d.attack.poisoners),
                poison_magnitude: attack.poison_magnitude.unwrap_or(d.attack.poison_magnitude),
                ddos: DdosConfig {
                    attack_fraction: attack.ddos_fraction.unwrap_or(d.attack.ddos.attack_fraction),
                    retarget_lag_terms: attack.ddos_lag_terms.unwrap_or(d.attack.ddos.retarget_lag_terms),
                },
                defense,
            },
            duration_s: self.duration_s.unwrap_or(d.duration_s),
            master_seed: self.master_seed.unwrap_or(d.master_seed),
            metrics_interval_s: self.metrics_interval_s.unwrap_or(d.metrics_interval_s),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_config(cfg: &ScenarioConfig) -> Self {
        ScenarioFile {
            strategy: Some(cfg.strategy.to_string()),
            static_epsilon: None,
            duration_s: Some(cfg.duration_s),
            master_seed: Some(cfg.master_seed),
            metrics_interval_s: Some(cfg.metrics_interval_s),
            term_blocks: Some(cfg.term_blocks),
            train: Some(TrainFile {
                epochs: Some(cfg.train.epochs),
                learning_rate: Some(cfg.train.learning_rate),
                batch_size: Some(cfg.train.batch_size),
            }),
            data: Some(DataFile {
                features: Some(cfg.data.features),
                classes: Some(cfg.data.classes),
                separation: Some(cfg.data.separation),
                anisotropy: Some(cfg.data.anisotropy),
                test_fraction: Some(cfg.data.test_fraction),
            }),
            chain: Some(ChainFile {
                max_wait_s: Some(cfg.chain_policy.max_wait_s),
                max_records: Some(cfg.chain_policy.max_records),
                max_block_bytes: Some(cfg.chain_policy.max_block_bytes),
            }),
            payload: Some(PayloadFile {
                model_bits: cfg.payload.model_bits,
                hash_bits: Some(cfg.payload.hash_bits),
            }),
            attack: Some(AttackFile {
                poisoners: Some(cfg.attack.poisoners.iter().copied().collect()),
                poison_magnitude: Some(cfg.attack.poison_magnitude),
                defense_theta: cfg.attack.defense.theta(),
                ddos_fraction: Some(cfg.attack.ddos.attack_fraction),
                ddos_lag_terms: Some(cfg.attack.ddos.retarget_lag_terms),
            }),
            nodes: Some(cfg.nodes.iter().map(NodeFile::from_config).collect()),
        }
    }
}

/// Parses and validates a scenario from TOML text.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_config()
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Serializes every field explicitly; [`parse_scenario`] inverts it.
pub fn scenario_to_toml(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(&ScenarioFile::from_config(cfg)).map_err(|e| Error::Parse(e.to_string()))
}

/// Attack preset applied on top of a scenario file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackOverride {
    /// The last node in the scenario poisons its uploads.
    Poisoning,
    /// Flood with this fraction of traffic.
    Ddos(f64),
}

impl FromStr for AttackOverride {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("poisoning") {
            return Ok(AttackOverride::Poisoning);
        }
        let frac = s
            .strip_prefix("ddos:")
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::config(
                    "attack",
                    format!("expected `poisoning` or `ddos:<fraction>`, got `{s}`"),
                )
            })?;
        Ok(AttackOverride::Ddos(frac))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    /// Seeds to run. Empty runs the scenario's own `master_seed`.
    pub seeds: Vec<u64>,
    /// Strategies to run. Empty keeps the scenario's strategy.
    pub strategies: Vec<Strategy>,
    pub attack: Option<AttackOverride>,
    pub defense: Option<f64>,
}

impl RunManifest {
    pub fn new(scenario: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            scenario: scenario.into(),
            out_dir: out_dir.into(),
            seeds: Vec::new(),
            strategies: Vec::new(),
            attack: None,
            defense: None,
        }
    }

    /// The scenario for every `(strategy, seed)` pair, strategy-major.
    pub fn expand(&self) -> Result<Vec<ScenarioConfig>> {
        let mut base = load_scenario(&self.scenario)?;
        match self.attack {
            Some(AttackOverride::Poisoning) => {
                let last = base.nodes.last().map(|n| n.id).expect("validated");
                base.attack.poisoners = BTreeSet::from([last]);
            }
            Some(AttackOverride::Ddos(f)) => base.attack.ddos.attack_fraction = f,
            None => {}
        }
        if let Some(theta) = self.defense {
            base.attack.defense = DefensePolicy::threshold(theta)?;
        }
        let strategies = if self.strategies.is_empty() {
            vec![base.strategy]
        } else {
            self.strategies.clone()
        };
        let seeds = if self.seeds.is_empty() {
            vec![base.master_seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::with_capacity(strategies.len() * seeds.len());
        for &strategy in &strategies {
            for &seed in &seeds {
                let cfg = ScenarioConfig {
                    strategy,
                    master_seed: seed,
                    ..base.clone()
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// File-name form of a strategy: `static:0.5` becomes `static-0.5`.
pub fn strategy_slug(s: Strategy) -> String {
    s.to_string().replace(':', "-")
}

pub fn metrics_file_name(s: Strategy, seed: u64) -> String {
    format!("metrics_{}_seed{seed}.csv", strategy_slug(s))
}

pub fn chain_file_name(s: Strategy, seed: u64) -> String {
    format!("chain_{}_seed{seed}.txt", strategy_slug(s))
}

/// Renders the metrics rows as CSV with a header naming every column.
pub fn metrics_csv(rows: &[MetricsRow], strategy: Strategy, seed: u64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    let strategy = strategy.to_string();
    let seed = seed.to_string();
    for r in rows {
        w.write_record([
            r.sim_time_s.to_string(),
            r.avg_test_accuracy.to_string(),
            r.global_objective.to_string(),
            r.stages.training.to_string(),
            r.stages.testing.to_string(),
            r.stages.communication.to_string(),
            r.stages.waiting.to_string(),
            r.blocks_appended.to_string(),
            r.current_leader.map(|l| l.to_string()).unwrap_or_default(),
            strategy.clone(),
            seed.clone(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    let metrics = metrics_csv(&out.rows, out.strategy, out.seed)?;
    let first = write_atomic(dir, &metrics_file_name(out.strategy, out.seed), &metrics)?;
    match write_atomic(
        dir,
        &chain_file_name(out.strategy, out.seed),
        out.chain_dump().as_bytes(),
    ) {
        Ok(second) => Ok(vec![first, second]),
        Err(e) => {
            let _ = fs::remove_file(&first);
            Err(e)
        }
    }
}

/// Runs every scenario of the manifest, in parallel, and writes one metrics
/// file and one chain dump per run. On any failure the files this call
/// wrote are removed and the first error is returned.
pub fn run(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let jobs = manifest.expand()?;
    fs::create_dir_all(&manifest.out_dir)?;
    let results: Vec<Result<Vec<PathBuf>>> = jobs
        .par_iter()
        .map(|cfg| run_scenario(cfg).and_then(|out| write_run(&manifest.out_dir, &out)))
        .collect();
    let mut written = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(paths) => written.extend(paths),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        None => Ok(written),
        Some(e) => {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            Err(e)
        }
    }
}

/// Parses a seed list: `3`, `0..5` (exclusive), `0..=4`, or a
/// comma-separated mix.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::config("seeds", format!("cannot parse seed list `{spec}`"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..=") {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            seeds.extend(a..=b);
        } else if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

pub fn parse_strategies(spec: &str) -> Result<Vec<Strategy>> {
    let list: Vec<Strategy> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(Error::config("strategies", "no strategies given"));
    }
    Ok(list)
}

/// Re-verifies every block hash and link of a dumped chain.
pub fn audit_chain(path: &Path) -> Result<AuditOutcome> {
    let text = fs::read_to_string(path)?;
    Ok(Chain::parse_dump(&text)?.audit())
}

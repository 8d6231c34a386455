use std::collections::BTreeMap;

use crate::chain::{hash_model, Digest, HashRecord, Ledger, NodeId};
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, global_objective, local_loss, local_train, Dataset, ModelParams};
use crate::netsim::{ddos_effective_rate, EventQueue, LinkParams, PayloadSizes};
use crate::seed::{self, Purpose};

use super::config::{NodeConfig, Role, ScenarioConfig, Strategy};
use super::protocol::{
    average_test_accuracy, leader_aggregation_step, poison, screen, synchronous_round, AggregatorState, Incoming,
    StepOutcome, Weighting,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Training,
    Testing,
    Communication,
    Waiting,
}

/// Seconds spent in each stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub training: f64,
    pub testing: f64,
    pub communication: f64,
    pub waiting: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.training + self.testing + self.communication + self.waiting
    }

    fn add(&mut self, stage: Stage, dt: f64) {
        match stage {
            Stage::Training => self.training += dt,
            Stage::Testing => self.testing += dt,
            Stage::Communication => self.communication += dt,
            Stage::Waiting => self.waiting += dt,
        }
    }

    fn minus(&self, other: &StageTimes) -> StageTimes {
        StageTimes {
            training: self.training - other.training,
            testing: self.testing - other.testing,
            communication: self.communication - other.communication,
            waiting: self.waiting - other.waiting,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sim_time_s: f64,
    pub avg_test_accuracy: f64,
    pub global_objective: f64,
    /// Cumulative stage seconds averaged over nodes.
    pub stages: StageTimes,
    /// Blocks after genesis.
    pub blocks_appended: u64,
    /// Committee leader, or the fixed server. `None` without aggregation.
    pub current_leader: Option<NodeId>,
}

/// One completed local round: from the start of its download to the start of
/// the node's next round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub node: NodeId,
    pub round: u64,
    pub start_s: f64,
    pub end_s: f64,
    /// Global version the round trained from.
    pub base_version: u64,
    pub stages: StageTimes,
}

impl RoundLog {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// One screening or aggregation decision at the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationEvent {
    pub time_s: f64,
    /// Node that produced the local model; `None` for a synchronous round.
    pub sender: Option<NodeId>,
    pub aggregator: NodeId,
    pub outcome: StepOutcome,
    /// The sender's digest record, under ledger strategies.
    pub local_record: Option<HashRecord>,
    /// The global digest record written after the step, if any.
    pub global_record: Option<HashRecord>,
    pub global_before: Digest,
    pub global_after: Digest,
    pub version_after: u64,
}

/// One processed simulator event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub time_s: f64,
    pub kind: &'static str,
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Per-row accuracy of each node, in node order.
    pub node_accuracy: Vec<Vec<f64>>,
    /// Per-node stage totals over the whole run, in node order.
    pub node_stages: Vec<StageTimes>,
    pub rounds: Vec<RoundLog>,
    pub aggregations: Vec<AggregationEvent>,
    pub ledger: Option<Ledger>,
    pub final_global: Option<ModelParams>,
    /// Every event in processing order.
    pub trace: Vec<TraceEntry>,
}

impl RunOutput {
    /// The chain dump. Ledger-free strategies produce an empty chain.
    pub fn chain_dump(&self) -> String {
        match &self.ledger {
            Some(l) => l.chain().dump(),
            None => crate::chain::Chain::from_blocks(Vec::new()).dump(),
        }
    }
}

/// Mean accuracy over the last tenth of the rows (at least one row).
pub fn final_accuracy(rows: &[MetricsRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let tail = (rows.len() / 10).max(1);
    rows[rows.len() - tail..]
        .iter()
        .map(|r| r.avg_test_accuracy)
        .sum::<f64>()
        / tail as f64
}

/// First sample time at which the average accuracy reaches `level`.
pub fn time_to_reach(rows: &[MetricsRow], level: f64) -> Option<f64> {
    rows.iter().find(|r| r.avg_test_accuracy >= level).map(|r| r.sim_time_s)
}

#[derive(Debug, Clone)]
enum Event {
    Sample,
    GenesisTrained,
    GenesisSealed,
    StartRound(usize),
    DownloadDone(usize),
    TrainDone(usize),
    TestDone(usize),
    UploadDone(usize),
    Arrive {
        sender: usize,
        params: ModelParams,
        record: Option<HashRecord>,
    },
    Publish {
        global: ModelParams,
        version: u64,
    },
    BlockTimer {
        since: f64,
    },
}

impl Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::Sample => "sample",
            Event::GenesisTrained => "genesis_trained",
            Event::GenesisSealed => "genesis_sealed",
            Event::StartRound(_) => "start_round",
            Event::DownloadDone(_) => "download_done",
            Event::TrainDone(_) => "train_done",
            Event::TestDone(_) => "test_done",
            Event::UploadDone(_) => "upload_done",
            Event::Arrive { .. } => "arrive",
            Event::Publish { .. } => "publish",
            Event::BlockTimer { .. } => "block_timer",
        }
    }

    fn node(&self) -> Option<usize> {
        match self {
            Event::StartRound(i)
            | Event::DownloadDone(i)
            | Event::TrainDone(i)
            | Event::TestDone(i)
            | Event::UploadDone(i)
            | Event::Arrive { sender: i, .. } => Some(*i),
            _ => None,
        }
    }
}

struct Node {
    cfg: NodeConfig,
    train: Dataset,
    test: Dataset,
    /// Model the node currently holds: the last global it downloaded or the
    /// local model it last trained.
    model: ModelParams,
    incoming: Option<(ModelParams, u64)>,
    round: u64,
    base_version: u64,
    epsilon: f64,
    stage: Stage,
    stage_since: f64,
    stages: StageTimes,
    round_start: Option<(f64, StageTimes)>,
    /// Replica or server this node's transfers go through.
    gateway: NodeId,
    cached_acc: Option<f64>,
    cached_loss: Option<f64>,
}

impl Node {
    fn enter(&mut self, stage: Stage, now: f64) {
        self.stages.add(self.stage, now - self.stage_since);
        self.stage = stage;
        self.stage_since = now;
    }

    fn stages_at(&self, now: f64) -> StageTimes {
        let mut s = self.stages;
        s.add(self.stage, now - self.stage_since);
        s
    }

    fn set_model(&mut self, model: ModelParams) {
        self.model = model;
        self.cached_acc = None;
        self.cached_loss = None;
    }

    fn accuracy(&mut self) -> Result<f64> {
        if self.cached_acc.is_none() {
            self.cached_acc = Some(evaluate_accuracy(&self.model, &self.test)?);
        }
        Ok(self.cached_acc.unwrap_or_default())
    }

    fn loss(&mut self) -> Result<f64> {
        if self.cached_loss.is_none() {
            self.cached_loss = Some(local_loss(&self.model, &self.train)?);
        }
        Ok(self.cached_loss.unwrap_or_default())
    }

    fn train_time(&self, epochs: u32) -> f64 {
        self.cfg.compute_time_multiplier * epochs as f64 * self.train.len() as f64 / 1000.0
    }

    fn test_time(&self) -> f64 {
        self.cfg.compute_time_multiplier * self.test.len() as f64 / 1000.0
    }
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    sizes: PayloadSizes,
    queue: EventQueue<Event>,
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    ledger: Option<Ledger>,
    state: AggregatorState,
    /// Global model visible to nodes other than the aggregator.
    published: (ModelParams, u64),
    /// Fixed server for ledger-free strategies.
    server: Option<NodeId>,
    /// Local models collected for the current synchronous round.
    batch: Vec<(ModelParams, usize)>,
    batch_arrivals: usize,
    waiting: Vec<usize>,
    timer_for: Option<f64>,
    out_rows: Vec<MetricsRow>,
    out_node_acc: Vec<Vec<f64>>,
    rounds: Vec<RoundLog>,
    aggregations: Vec<AggregationEvent>,
    trace: Vec<TraceEntry>,
}

/// Runs a scenario to `duration_s` and collects its metrics.
///
/// Ledger strategies start with the first RSU training the initial model
/// alone while every other node waits; its digests form the genesis block
/// and elect the first leader. Each node then loops download, train, test,
/// upload. Asynchronous strategies start the next round right after the
/// upload; synchronous ones wait for the round's global model.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    sim.run()?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let shards = cfg.node_datasets()?;
        let rsus = cfg.rsu_ids();
        let dim = cfg.model_dim();
        let mut next_rsu = 0usize;
        let server = match cfg.strategy {
            Strategy::FedAvg | Strategy::Afl => rsus.first().copied(),
            _ => None,
        };
        let nodes = cfg
            .nodes
            .iter()
            .zip(shards)
            .map(|(nc, (train, test))| {
                let gateway = match (nc.role, server) {
                    (_, Some(s)) => s,
                    (Role::Rsu, None) => nc.id,
                    (Role::Bus, None) => nc.nearby_rsu.unwrap_or_else(|| {
                        let r = rsus.get(next_rsu % rsus.len().max(1)).copied().unwrap_or(nc.id);
                        next_rsu += 1;
                        r
                    }),
                };
                Node {
                    cfg: nc.clone(),
                    train,
                    test,
                    model: ModelParams::zeros(dim),
                    incoming: None,
                    round: 0,
                    base_version: 0,
                    epsilon: 1.0,
                    stage: Stage::Waiting,
                    stage_since: 0.0,
                    stages: StageTimes::default(),
                    round_start: None,
                    gateway,
                    cached_acc: None,
                    cached_loss: None,
                }
            })
            .collect::<Vec<_>>();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.cfg.id, i)).collect();
        Ok(Sim {
            cfg,
            sizes: cfg.payload_sizes(),
            queue: EventQueue::new(),
            nodes,
            index,
            ledger: None,
            state: AggregatorState::new(ModelParams::zeros(dim)),
            published: (ModelParams::zeros(dim), 0),
            server,
            batch: Vec::new(),
            batch_arrivals: 0,
            waiting: Vec::new(),
            timer_for: None,
            out_rows: Vec::new(),
            out_node_acc: Vec::new(),
            rounds: Vec::new(),
            aggregations: Vec::new(),
            trace: Vec::new(),
        })
    }

    fn strategy(&self) -> Strategy {
        self.cfg.strategy
    }

    fn node_idx(&self, id: NodeId) -> usize {
        self.index[&id]
    }

    fn run(&mut self) -> Result<()> {
        let n_samples = (self.cfg.duration_s / self.cfg.metrics_interval_s + 1e-9).floor() as u64;
        for k in 0..=n_samples {
            self.queue
                .schedule(k as f64 * self.cfg.metrics_interval_s, Event::Sample)?;
        }
        if self.strategy().uses_ledger() {
            let first = self
                .nodes
                .iter()
                .position(|n| n.cfg.role == Role::Rsu)
                .expect("validated");
            let t = self.nodes[first].train_time(self.cfg.train.epochs);
            self.nodes[first].enter(Stage::Training, 0.0);
            self.queue.schedule(t, Event::GenesisTrained)?;
        } else {
            for i in 0..self.nodes.len() {
                self.queue.schedule(0.0, Event::StartRound(i))?;
            }
        }
        while let Some(t) = self.queue.peek_time() {
            if t > self.cfg.duration_s {
                break;
            }
            let (now, ev) = self.queue.pop().expect("peeked");
            self.trace.push(TraceEntry {
                time_s: now,
                kind: ev.kind(),
                node: ev.node().map(|i| self.nodes[i].cfg.id),
            });
            self.handle(now, ev)?;
        }
        let end = self.cfg.duration_s;
        for n in &mut self.nodes {
            n.enter(Stage::Waiting, end);
        }
        if let Some(ledger) = &mut self.ledger {
            ledger.seal(end)?;
        }
        Ok(())
    }

    fn finish(self) -> RunOutput {
        let has_global = self.cfg.strategy.communicates();
        RunOutput {
            strategy: self.cfg.strategy,
            seed: self.cfg.master_seed,
            rows: self.out_rows,
            node_accuracy: self.out_node_acc,
            node_stages: self.nodes.iter().map(|n| n.stages).collect(),
            rounds: self.rounds,
            aggregations: self.aggregations,
            ledger: self.ledger,
            final_global: has_global.then_some(self.state.global),
            trace: self.trace,
        }
    }

    fn handle(&mut self, now: f64, ev: Event) -> Result<()> {
        match ev {
            Event::Sample => self.sample(now),
            Event::GenesisTrained => self.genesis_trained(now),
            Event::GenesisSealed => self.genesis_sealed(now),
            Event::StartRound(i) => self.start_round(i, now),
            Event::DownloadDone(i) => {
                if let Some((model, version)) = self.nodes[i].incoming.take() {
                    self.nodes[i].set_model(model);
                    self.nodes[i].base_version = version;
                }
                self.begin_training(i, now)
            }
            Event::TrainDone(i) => self.train_done(i, now),
            Event::TestDone(i) => self.test_done(i, now),
            Event::UploadDone(i) => self.upload_done(i, now),
            Event::Arrive { sender, params, record } => self.arrive(sender, params, record, now),
            Event::Publish { global, version } => self.publish(global, version, now),
            Event::BlockTimer { since } => {
                if let Some(ledger) = &mut self.ledger {
                    if ledger.pending_since() == Some(since) {
                        ledger.seal(now)?;
                    }
                }
                self.timer_for = None;
                self.arm_timer()
            }
        }
    }

    fn genesis_trained(&mut self, now: f64) -> Result<()> {
        let first = self
            .nodes
            .iter()
            .position(|n| n.cfg.role == Role::Rsu)
            .expect("validated");
        let node = &self.nodes[first];
        let seed = seed::derive(self.cfg.master_seed, Purpose::Genesis, node.cfg.id, 0);
        let w0 = local_train(&node.model, &node.train, &self.cfg.train, seed)?;
        self.nodes[first].set_model(w0.clone());
        self.state = AggregatorState::new(w0.clone());
        self.published = (w0, 0);
        self.nodes[first].enter(Stage::Communication, now);
        let t = self.sizes.hash_bits / self.nodes[first].cfg.link.mobile_rate();
        self.queue.schedule(now + t, Event::GenesisSealed)
    }

    fn genesis_sealed(&mut self, now: f64) -> Result<()> {
        let first = self
            .nodes
            .iter()
            .position(|n| n.cfg.role == Role::Rsu)
            .expect("validated");
        let id = self.nodes[first].cfg.id;
        let digest = hash_model(&self.state.global)?;
        let records = vec![HashRecord::local(id, 0, digest), HashRecord::global(id, 0, digest)];
        self.ledger = Some(Ledger::new(
            records,
            crate::chain::seconds_to_ms(now),
            self.cfg.rsu_ids(),
            self.cfg.term_blocks,
            self.cfg.chain_policy,
        )?);
        for i in 0..self.nodes.len() {
            self.queue.schedule(now, Event::StartRound(i))?;
        }
        Ok(())
    }

    /// The node currently aggregating: the committee leader or fixed server.
    fn aggregator(&self) -> Option<NodeId> {
        match (&self.ledger, self.server) {
            (Some(l), _) => Some(l.committee().leader()),
            (None, s) => s,
        }
    }

    /// Node being flooded, if any.
    fn ddos_target(&self) -> Option<NodeId> {
        let ddos = &self.cfg.attack.ddos;
        if !ddos.is_active() {
            return None;
        }
        match &self.ledger {
            Some(l) => {
                let term = l.committee().term();
                term.checked_sub(ddos.retarget_lag_terms)
                    .and_then(|t| l.terms().get(t as usize))
                    .map(|t| t.leader)
            }
            None => self.server,
        }
    }

    /// Time to move `bits` between `a` and `b` at `rate`. The rate drops to
    /// `(1 − f)` of itself when either endpoint is under attack while serving
    /// as the aggregator.
    fn leg(&self, bits: f64, rate: f64, a: NodeId, b: NodeId) -> Result<f64> {
        let target_is_server = match self.ddos_target() {
            Some(t) => (t == a || t == b) && self.aggregator() == Some(t),
            None => false,
        };
        let effective = ddos_effective_rate(rate, &self.cfg.attack.ddos, target_is_server);
        crate::netsim::tx_time(bits, effective)
    }

    fn link(&self, i: usize) -> &LinkParams {
        &self.nodes[i].cfg.link
    }

    fn download_time(&self, i: usize) -> Result<f64> {
        let n = &self.nodes[i];
        let (id, gw) = (n.cfg.id, n.gateway);
        if id == gw {
            return Ok(0.0);
        }
        let rate = match n.cfg.role {
            Role::Bus => self.link(i).mobile_rate(),
            Role::Rsu => self.link(i).ethernet_rate_bps,
        };
        self.leg(self.sizes.model_bits, rate, id, gw)
    }

    fn upload_time(&self, i: usize) -> Result<f64> {
        let n = &self.nodes[i];
        let (id, gw) = (n.cfg.id, n.gateway);
        let ledger = self.strategy().uses_ledger();
        if id == gw {
            return if ledger {
                self.leg(self.sizes.hash_bits, self.link(i).mobile_rate(), id, gw)
            } else {
                Ok(0.0)
            };
        }
        match n.cfg.role {
            Role::Bus => {
                let bits = self.sizes.model_bits + if ledger { self.sizes.hash_bits } else { 0.0 };
                self.leg(bits, self.link(i).mobile_rate(), id, gw)
            }
            Role::Rsu => self.leg(self.sizes.model_bits, self.link(i).ethernet_rate_bps, id, gw),
        }
    }

    /// Background copy of a model from the database replica it landed in to
    /// the current leader.
    fn sync_time(&self, from: NodeId) -> Result<f64> {
        let leader = match self.aggregator() {
            Some(l) if self.ledger.is_some() && l != from => l,
            _ => return Ok(0.0),
        };
        let rate = self.link(self.node_idx(from)).ethernet_rate_bps;
        self.leg(self.sizes.model_bits, rate, from, leader)
    }

    /// Delay between an aggregation and the new global reaching the replicas.
    fn publish_time(&self) -> Result<f64> {
        match (&self.ledger, self.aggregator()) {
            (Some(_), Some(leader)) => {
                let link = self.link(self.node_idx(leader));
                let up_hash = self.leg(self.sizes.hash_bits, link.mobile_rate(), leader, leader)?;
                let share = self.leg(self.sizes.model_bits, link.ethernet_rate_bps, leader, leader)?;
                Ok(up_hash + share)
            }
            _ => Ok(0.0),
        }
    }

    fn start_round(&mut self, i: usize, now: f64) -> Result<()> {
        let snapshot = self.nodes[i].stages_at(now);
        let node = &mut self.nodes[i];
        if let Some((start, stages)) = node.round_start.take() {
            self.rounds.push(RoundLog {
                node: node.cfg.id,
                round: node.round,
                start_s: start,
                end_s: now,
                base_version: node.base_version,
                stages: snapshot.minus(&stages),
            });
        }
        node.round += 1;
        node.round_start = Some((now, snapshot));
        if !self.strategy().communicates() {
            return self.begin_training(i, now);
        }
        let id = self.nodes[i].cfg.id;
        let latest = if self.aggregator() == Some(id) {
            (self.state.global.clone(), self.state.version)
        } else {
            self.published.clone()
        };
        self.nodes[i].incoming = Some(latest);
        let t = self.download_time(i)?;
        self.nodes[i].enter(Stage::Communication, now);
        self.queue.schedule(now + t, Event::DownloadDone(i))
    }

    fn begin_training(&mut self, i: usize, now: f64) -> Result<()> {
        let t = self.nodes[i].train_time(self.cfg.train.epochs);
        self.nodes[i].enter(Stage::Training, now);
        self.queue.schedule(now + t, Event::TrainDone(i))
    }

    fn train_done(&mut self, i: usize, now: f64) -> Result<()> {
        let node = &self.nodes[i];
        let seed = seed::derive(self.cfg.master_seed, Purpose::Train, node.cfg.id, node.round);
        let local = local_train(&node.model, &node.train, &self.cfg.train, seed)?;
        let t = node.test_time();
        self.nodes[i].set_model(local);
        self.nodes[i].enter(Stage::Testing, now);
        self.queue.schedule(now + t, Event::TestDone(i))
    }

    fn test_done(&mut self, i: usize, now: f64) -> Result<()> {
        if !self.strategy().communicates() {
            return self.queue.schedule(now, Event::StartRound(i));
        }
        let t = self.upload_time(i)?;
        self.nodes[i].enter(Stage::Communication, now);
        self.queue.schedule(now + t, Event::UploadDone(i))
    }

    fn upload_done(&mut self, i: usize, now: f64) -> Result<()> {
        let node = &self.nodes[i];
        let id = node.cfg.id;
        let sent = if self.cfg.attack.poisoners.contains(&id) {
            let seed = seed::derive(self.cfg.master_seed, Purpose::Poison, id, node.round);
            poison(&node.model, self.cfg.attack.poison_magnitude, seed)?
        } else {
            node.model.clone()
        };
        let round = node.round;
        let gateway = node.gateway;
        let record = match &mut self.ledger {
            Some(ledger) => {
                let record = HashRecord::local(id, round, hash_model(&sent)?);
                ledger.submit(record, now)?;
                Some(record)
            }
            None => None,
        };
        self.arm_timer()?;
        let t = self.sync_time(gateway)?;
        self.queue.schedule(
            now + t,
            Event::Arrive {
                sender: i,
                params: sent,
                record,
            },
        )?;
        if self.strategy().is_synchronous() {
            self.nodes[i].enter(Stage::Waiting, now);
            self.waiting.push(i);
            Ok(())
        } else {
            self.queue.schedule(now, Event::StartRound(i))
        }
    }

    fn arm_timer(&mut self) -> Result<()> {
        let Some(ledger) = &self.ledger else {
            return Ok(());
        };
        if let Some(since) = ledger.pending_since() {
            if self.timer_for != Some(since) {
                self.timer_for = Some(since);
                let at = (since + ledger.policy().max_wait_s).max(self.queue.now());
                self.queue.schedule(at, Event::BlockTimer { since })?;
            }
        }
        Ok(())
    }

    fn arrive(&mut self, sender: usize, params: ModelParams, record: Option<HashRecord>, now: f64) -> Result<()> {
        let aggregator = self
            .aggregator()
            .ok_or_else(|| Error::contract("model arrived with no aggregator"))?;
        let agg_idx = self.node_idx(aggregator);
        let sender_id = self.nodes[sender].cfg.id;
        let before = hash_model(&self.state.global)?;
        let incoming = Incoming {
            sender: sender_id,
            params: &params,
            record: record.as_ref(),
        };
        let defense = self.cfg.attack.defense;
        let outcome = if self.strategy().is_synchronous() {
            let screened = screen(
                &self.state,
                &incoming,
                &self.nodes[agg_idx].test,
                self.ledger.as_mut(),
                defense,
            )?;
            match screened {
                Ok((acc_local, acc_global)) => {
                    self.batch.push((params.clone(), self.nodes[sender].train.len()));
                    StepOutcome::Collected { acc_local, acc_global }
                }
                Err(o) => o,
            }
        } else {
            let weighting = match self.strategy() {
                Strategy::Dbafl => Weighting::Dynamic,
                Strategy::StaticEps(e) => Weighting::Static(e),
                _ => Weighting::Static(1.0),
            };
            leader_aggregation_step(
                &mut self.state,
                &incoming,
                aggregator,
                &self.nodes[agg_idx].test,
                self.ledger.as_mut(),
                weighting,
                defense,
                now,
            )?
        };
        if let StepOutcome::Aggregated { epsilon, .. } = outcome {
            self.nodes[sender].epsilon = epsilon;
        }
        let global_record = self.global_record_if(outcome.changed_global(), aggregator)?;
        self.aggregations.push(AggregationEvent {
            time_s: now,
            sender: Some(sender_id),
            aggregator,
            outcome,
            local_record: record,
            global_record,
            global_before: before,
            global_after: hash_model(&self.state.global)?,
            version_after: self.state.version,
        });
        if outcome.changed_global() {
            self.schedule_publish(now)?;
        }
        if self.strategy().is_synchronous() {
            self.batch_arrivals += 1;
            if self.batch_arrivals == self.nodes.len() {
                self.fire_synchronous_round(aggregator, now)?;
            }
        }
        self.arm_timer()
    }

    fn global_record_if(&self, changed: bool, aggregator: NodeId) -> Result<Option<HashRecord>> {
        if !changed || self.ledger.is_none() {
            return Ok(None);
        }
        Ok(Some(HashRecord::global(
            aggregator,
            self.state.version,
            hash_model(&self.state.global)?,
        )))
    }

    fn fire_synchronous_round(&mut self, aggregator: NodeId, now: f64) -> Result<()> {
        let before = hash_model(&self.state.global)?;
        let batch = std::mem::take(&mut self.batch);
        self.batch_arrivals = 0;
        let contributors = batch.len();
        if contributors > 0 {
            self.state.global = synchronous_round(&self.state.global, &batch, self.strategy())?;
            self.state.version += 1;
            if let Some(ledger) = &mut self.ledger {
                let digest = hash_model(&self.state.global)?;
                ledger.submit(HashRecord::global(aggregator, self.state.version, digest), now)?;
            }
        }
        let outcome = StepOutcome::SynchronousRound { contributors };
        self.aggregations.push(AggregationEvent {
            time_s: now,
            sender: None,
            aggregator,
            outcome,
            local_record: None,
            global_record: self.global_record_if(contributors > 0, aggregator)?,
            global_before: before,
            global_after: hash_model(&self.state.global)?,
            version_after: self.state.version,
        });
        // Nodes resume once the round's model is out, even if nothing changed.
        self.schedule_publish(now)
    }

    fn schedule_publish(&mut self, now: f64) -> Result<()> {
        let t = self.publish_time()?;
        self.queue.schedule(
            now + t,
            Event::Publish {
                global: self.state.global.clone(),
                version: self.state.version,
            },
        )
    }

    fn publish(&mut self, global: ModelParams, version: u64, now: f64) -> Result<()> {
        if version >= self.published.1 {
            self.published = (global, version);
        }
        if self.strategy().is_synchronous() {
            for i in std::mem::take(&mut self.waiting) {
                self.queue.schedule(now, Event::StartRound(i))?;
            }
        }
        Ok(())
    }

    fn sample(&mut self, now: f64) -> Result<()> {
        let mut accs = Vec::with_capacity(self.nodes.len());
        let mut losses = Vec::with_capacity(self.nodes.len());
        let mut epsilons = Vec::with_capacity(self.nodes.len());
        let mut stages = StageTimes::default();
        for n in &mut self.nodes {
            accs.push(n.accuracy()?);
            losses.push(n.loss()?);
            epsilons.push(n.epsilon);
            let s = n.stages_at(now);
            stages.training += s.training;
            stages.testing += s.testing;
            stages.communication += s.communication;
            stages.waiting += s.waiting;
        }
        let k = self.nodes.len() as f64;
        stages.training /= k;
        stages.testing /= k;
        stages.communication /= k;
        stages.waiting /= k;
        let row = MetricsRow {
            sim_time_s: now,
            avg_test_accuracy: average_test_accuracy(&accs)?,
            global_objective: global_objective(&epsilons, &losses, self.nodes.len())?,
            stages,
            blocks_appended: self.ledger.as_ref().map_or(0, |l| l.chain().len() as u64 - 1),
            current_leader: self.aggregator(),
        };
        self.out_rows.push(row);
        self.out_node_acc.push(accs);
        Ok(())
    }
}

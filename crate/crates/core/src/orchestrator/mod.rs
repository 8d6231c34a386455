//! Node state machines and the end-to-end training workflow.
//!
//! A scenario is a set of buses and RSUs, each holding a disjoint shard of a
//! synthetic dataset, running one aggregation [`Strategy`] for a fixed span
//! of simulated time. [`run_scenario`] returns a metrics time series, the
//! final ledger and enough per-node bookkeeping to audit stage accounting.

mod config;
mod protocol;
mod sim;

pub use config::{AttackConfig, DataConfig, NodeConfig, PayloadConfig, Role, ScenarioConfig, Strategy};
pub use protocol::{
    average_test_accuracy, leader_aggregation_step, poison, synchronous_round, AggregatorState, Incoming, StepOutcome,
    Weighting,
};
pub use sim::{
    final_accuracy, run_scenario, time_to_reach, AggregationEvent, MetricsRow, RoundLog, RunOutput, Stage, StageTimes,
    TraceEntry,
};

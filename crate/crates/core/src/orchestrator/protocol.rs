use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    aggregate_async, aggregate_fedavg, aggregate_static, defense_filter, scaling_factor, DefensePolicy, ScalingFactor,
    Verdict,
};
use crate::chain::{hash_model, HashRecord, Ledger, NodeId, RecordCheck};
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, Dataset, ModelParams};

use super::config::Strategy;

/// The current global model and how many aggregations produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub global: ModelParams,
    pub version: u64,
}

impl AggregatorState {
    pub fn new(global: ModelParams) -> Self {
        AggregatorState { global, version: 0 }
    }
}

/// A local model as received by the aggregator, with the digest record its
/// sender wrote to the ledger (absent for ledger-free strategies).
#[derive(Debug, Clone, Copy)]
pub struct Incoming<'a> {
    pub sender: NodeId,
    pub params: &'a ModelParams,
    pub record: Option<&'a HashRecord>,
}

/// How an accepted local model is weighted against the global model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Accuracy ratio of local to global on the aggregator's test split.
    Dynamic,
    Static(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Aggregated {
        epsilon: f64,
        acc_local: f64,
        acc_global: f64,
    },
    /// Rejected by the accuracy threshold.
    Discarded { acc_local: f64, acc_global: f64 },
    /// The model did not match its on-chain digest; the sender is now
    /// blacklisted.
    Tampered,
    /// The sender was already blacklisted.
    Ignored,
    /// Passed screening and queued for a synchronous round.
    Collected { acc_local: f64, acc_global: f64 },
    /// A synchronous round fired over `contributors` accepted models.
    SynchronousRound { contributors: usize },
}

impl StepOutcome {
    pub fn changed_global(&self) -> bool {
        matches!(
            self,
            StepOutcome::Aggregated { .. } | StepOutcome::SynchronousRound { contributors: 1.. }
        )
    }
}

/// Verification and defense checks shared by the asynchronous step and
/// synchronous collection. Returns the two accuracies when the model may be
/// used.
pub(crate) fn screen(
    state: &AggregatorState,
    incoming: &Incoming<'_>,
    test: &Dataset,
    ledger: Option<&mut Ledger>,
    defense: DefensePolicy,
) -> Result<std::result::Result<(f64, f64), StepOutcome>> {
    if let Some(ledger) = ledger {
        let record = incoming
            .record
            .ok_or_else(|| Error::contract("ledger-backed aggregation needs the sender's digest record"))?;
        if ledger.committee().is_blacklisted(incoming.sender) {
            return Ok(Err(StepOutcome::Ignored));
        }
        if ledger.verify_record(incoming.params, record)? == RecordCheck::TamperedAndBlacklisted {
            return Ok(Err(StepOutcome::Tampered));
        }
    }
    let acc_local = evaluate_accuracy(incoming.params, test)?;
    let acc_global = evaluate_accuracy(&state.global, test)?;
    if defense_filter(acc_local, acc_global, defense) == Verdict::Discard {
        return Ok(Err(StepOutcome::Discarded { acc_local, acc_global }));
    }
    Ok(Ok((acc_local, acc_global)))
}

/// One asynchronous aggregation at the current leader.
///
/// Checks, in order: blacklist, digest match, accuracy threshold. An accepted
/// model is folded in with `ε` from `weighting`, the version advances, and the
/// new global digest is submitted to `ledger` under the leader's id at time
/// `now_s`. Every other outcome leaves `state` untouched.
pub fn leader_aggregation_step(
    state: &mut AggregatorState,
    incoming: &Incoming<'_>,
    leader: NodeId,
    leader_test: &Dataset,
    mut ledger: Option<&mut Ledger>,
    weighting: Weighting,
    defense: DefensePolicy,
    now_s: f64,
) -> Result<StepOutcome> {
    let (acc_local, acc_global) = match screen(state, incoming, leader_test, ledger.as_deref_mut(), defense)? {
        Ok(accs) => accs,
        Err(outcome) => return Ok(outcome),
    };
    let epsilon = match weighting {
        Weighting::Dynamic => scaling_factor(acc_local, acc_global).value(),
        Weighting::Static(e) => e,
    };
    state.global = match weighting {
        Weighting::Dynamic => aggregate_async(&state.global, incoming.params, ScalingFactor::new(epsilon))?,
        Weighting::Static(e) => aggregate_static(&state.global, incoming.params, e)?,
    };
    state.version += 1;
    if let Some(ledger) = ledger {
        let digest = hash_model(&state.global)?;
        ledger.submit(HashRecord::global(leader, state.version, digest), now_s)?;
    }
    Ok(StepOutcome::Aggregated {
        epsilon,
        acc_local,
        acc_global,
    })
}

/// Combines one round of collected local models, given with their sample
/// counts in arrival order. FedAVG takes the sample-weighted mean; BSFL folds
/// each model into `global_prev` with unit weight. With no models the
/// previous global is returned.
pub fn synchronous_round(
    global_prev: &ModelParams,
    models: &[(ModelParams, usize)],
    strategy: Strategy,
) -> Result<ModelParams> {
    if models.is_empty() {
        return Ok(global_prev.clone());
    }
    match strategy {
        Strategy::FedAvg => {
            let params: Vec<ModelParams> = models.iter().map(|(m, _)| m.clone()).collect();
            let sizes: Vec<usize> = models.iter().map(|(_, n)| *n).collect();
            aggregate_fedavg(&params, &sizes)
        }
        Strategy::Bsfl => models
            .iter()
            .try_fold(global_prev.clone(), |g, (m, _)| aggregate_static(&g, m, 1.0)),
        other => Err(Error::contract(format!("`{other}` is not a synchronous strategy"))),
    }
}

/// Adds independent uniform noise in `[-magnitude, magnitude]` to every
/// parameter.
pub fn poison(params: &ModelParams, magnitude: f64, rng_seed: u64) -> Result<ModelParams> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::contract("poison magnitude must be positive and finite"));
    }
    let noise = Uniform::new_inclusive(-magnitude, magnitude).map_err(|e| Error::contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ModelParams::new(params.values().iter().map(|v| v + noise.sample(&mut rng)).collect())
}

pub fn average_test_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::contract("no node accuracies to average"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::BlockCutPolicy;
    use crate::model::{generate_synthetic_dataset, local_train, SyntheticSpec, TrainConfig};

    fn p(v: &[f64]) -> ModelParams {
        ModelParams::new(v.to_vec()).unwrap()
    }

    fn blobs() -> Dataset {
        generate_synthetic_dataset(7, &SyntheticSpec::new(400, 2, 2, 6.0)).unwrap()
    }

    fn trained(data: &Dataset) -> ModelParams {
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.1,
            batch_size: 1500,
        };
        local_train(&ModelParams::zeros(data.param_dim()), data, &cfg, 0).unwrap()
    }

    fn ledger_with(record: HashRecord) -> Ledger {
        let mut ledger = Ledger::new(vec![], 0, vec![0, 1, 2], 10, BlockCutPolicy::default()).unwrap();
        ledger.submit(record, 0.0).unwrap();
        ledger
    }

    #[test]
    fn equal_accuracy_gives_exact_midpoint() {
        let data = blobs();
        let w = trained(&data);
        let mut state = AggregatorState::new(w.clone());
        let local = ModelParams::new(w.values().iter().map(|v| v * 2.0).collect()).unwrap();
        let out = leader_aggregation_step(
            &mut state,
            &Incoming {
                sender: 1,
                params: &local,
                record: None,
            },
            0,
            &data,
            None,
            Weighting::Dynamic,
            DefensePolicy::Off,
            0.0,
        )
        .unwrap();
        // scaling the logits does not move the argmax, so both accuracies match
        assert!(matches!(out, StepOutcome::Aggregated { epsilon, .. } if epsilon == 1.0));
        let expect: Vec<f64> = w.values().iter().map(|v| (v + v * 2.0) / 2.0).collect();
        assert_eq!(state.global.values(), &expect[..]);
        assert_eq!(state.version, 1);
    }

    #[test]
    fn tampered_model_is_a_no_op_and_blacklists() {
        let data = blobs();
        let honest = trained(&data);
        let record = HashRecord::local(4, 1, hash_model(&honest).unwrap());
        let mut ledger = ledger_with(record);
        let mut sent = honest.values().to_vec();
        sent[0] = f64::from_bits(sent[0].to_bits() + 1);
        let sent = p(&sent);
        let mut state = AggregatorState::new(ModelParams::zeros(data.param_dim()));
        let before = state.clone();
        let incoming = Incoming {
            sender: 4,
            params: &sent,
            record: Some(&record),
        };
        let out = leader_aggregation_step(
            &mut state,
            &incoming,
            0,
            &data,
            Some(&mut ledger),
            Weighting::Dynamic,
            DefensePolicy::Off,
            1.0,
        )
        .unwrap();
        assert_eq!(out, StepOutcome::Tampered);
        assert_eq!(state, before);
        assert!(ledger.committee().is_blacklisted(4));
        assert_eq!(ledger.pending().len(), 1);

        // even the honest model is ignored for the rest of the term
        let honest_in = Incoming {
            params: &honest,
            ..incoming
        };
        let out = leader_aggregation_step(
            &mut state,
            &honest_in,
            0,
            &data,
            Some(&mut ledger),
            Weighting::Dynamic,
            DefensePolicy::Off,
            1.0,
        )
        .unwrap();
        assert_eq!(out, StepOutcome::Ignored);
        assert_eq!(state, before);
    }

    #[test]
    fn accepted_model_writes_global_digest() {
        let data = blobs();
        let local = trained(&data);
        let record = HashRecord::local(3, 1, hash_model(&local).unwrap());
        let mut ledger = ledger_with(record);
        let mut state = AggregatorState::new(ModelParams::zeros(data.param_dim()));
        let out = leader_aggregation_step(
            &mut state,
            &Incoming {
                sender: 3,
                params: &local,
                record: Some(&record),
            },
            2,
            &data,
            Some(&mut ledger),
            Weighting::Static(0.5),
            DefensePolicy::Off,
            0.5,
        )
        .unwrap();
        assert!(matches!(out, StepOutcome::Aggregated { epsilon, .. } if epsilon == 0.5));
        let expect = HashRecord::global(2, 1, hash_model(&state.global).unwrap());
        assert!(ledger.contains_record(&expect));
    }

    #[test]
    fn discarded_model_leaves_global_bitwise_equal() {
        let data = blobs();
        let good = trained(&data);
        let bad = (0..)
            .map(|seed| poison(&good, 10.0, seed).unwrap())
            .find(|m| evaluate_accuracy(m, &data).unwrap() < 0.5)
            .unwrap();
        let mut state = AggregatorState::new(good);
        let before = state.clone();
        let out = leader_aggregation_step(
            &mut state,
            &Incoming {
                sender: 4,
                params: &bad,
                record: None,
            },
            0,
            &data,
            None,
            Weighting::Dynamic,
            DefensePolicy::threshold(0.9).unwrap(),
            0.0,
        )
        .unwrap();
        assert!(matches!(out, StepOutcome::Discarded { .. }));
        assert_eq!(state.global.to_le_bytes(), before.global.to_le_bytes());
        assert_eq!(state.version, before.version);
    }

    #[test]
    fn missing_record_under_ledger_is_a_contract_error() {
        let data = blobs();
        let w = ModelParams::zeros(data.param_dim());
        let mut ledger = Ledger::new(vec![], 0, vec![0], 10, BlockCutPolicy::default()).unwrap();
        let mut state = AggregatorState::new(w.clone());
        let res = leader_aggregation_step(
            &mut state,
            &Incoming {
                sender: 0,
                params: &w,
                record: None,
            },
            0,
            &data,
            Some(&mut ledger),
            Weighting::Dynamic,
            DefensePolicy::Off,
            0.0,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn synchronous_round_examples() {
        let m = p(&[0.5, -2.0]);
        let fed = synchronous_round(&p(&[9.0, 9.0]), &[(m.clone(), 3), (m.clone(), 8)], Strategy::FedAvg).unwrap();
        assert_eq!(fed, m);

        let g = p(&[1.0, 0.0]);
        let a = p(&[3.0, 2.0]);
        let b = p(&[-1.0, 4.0]);
        let out = synchronous_round(&g, &[(a.clone(), 1), (b.clone(), 1)], Strategy::Bsfl).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|i| ((g.values()[i] + a.values()[i]) / 2.0 + b.values()[i]) / 2.0)
            .collect();
        assert_eq!(out.values(), &expect[..]);

        assert_eq!(synchronous_round(&g, &[], Strategy::Bsfl).unwrap(), g);
        assert!(synchronous_round(&g, &[(a, 1)], Strategy::Dbafl).is_err());
    }

    #[test]
    fn poison_examples() {
        let w = p(&[0.25, -1.0, 3.0]);
        let tiny = poison(&w, 1e-15, 9).unwrap();
        for (a, b) in tiny.values().iter().zip(w.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(poison(&w, 10.0, 9).unwrap(), poison(&w, 10.0, 9).unwrap());
        assert_ne!(poison(&w, 10.0, 9).unwrap(), poison(&w, 10.0, 10).unwrap());
        for (a, b) in poison(&w, 2.0, 1).unwrap().values().iter().zip(w.values()) {
            assert!((a - b).abs() <= 2.0);
        }
        assert!(poison(&w, 0.0, 1).is_err());
    }

    #[test]
    fn poison_breaks_a_trained_separator() {
        let data = generate_synthetic_dataset(7, &SyntheticSpec::new(800, 4, 4, 6.0)).unwrap();
        let w = trained(&data);
        assert_eq!(evaluate_accuracy(&w, &data).unwrap(), 1.0);
        let accs: Vec<f64> = (0..200)
            .map(|seed| evaluate_accuracy(&poison(&w, 10.0, seed).unwrap(), &data).unwrap())
            .collect();
        let below = accs.iter().filter(|&&a| a < 0.6).count();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean < 0.6, "{mean}");
        assert!(below >= 180, "{below}");
    }

    #[test]
    fn average_examples() {
        assert_eq!(average_test_accuracy(&[0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(average_test_accuracy(&[0.3; 7]).unwrap(), 0.3);
        assert!(average_test_accuracy(&[]).is_err());
    }
}

//! Accuracy-weighted asynchronous aggregation, the accuracy-threshold defense
//! and the synchronous / static-weight baselines.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Accuracies below this are raised to it before taking the ratio.
pub const ACCURACY_FLOOR: f64 = 0.01;
pub const MIN_SCALING: f64 = 0.01;
pub const MAX_SCALING: f64 = 100.0;

/// Weight of an incoming local model relative to the current global model.
/// Always within `[MIN_SCALING, MAX_SCALING]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScalingFactor(f64);

impl ScalingFactor {
    /// Clamps `value` into the valid range. NaN maps to 1.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            return ScalingFactor(1.0);
        }
        ScalingFactor(value.clamp(MIN_SCALING, MAX_SCALING))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `ε = A_local / A_global`, with both accuracies floored at 1% and the
/// result clamped to `[0.01, 100]`.
pub fn scaling_factor(acc_local: f64, acc_global_prev: f64) -> ScalingFactor {
    let local = if acc_local.is_nan() {
        ACCURACY_FLOOR
    } else {
        acc_local.max(ACCURACY_FLOOR)
    };
    let global = if acc_global_prev.is_nan() {
        ACCURACY_FLOOR
    } else {
        acc_global_prev.max(ACCURACY_FLOOR)
    };
    ScalingFactor::new(local / global)
}

fn check_pair(a: &ModelParams, b: &ModelParams) -> Result<()> {
    b.check_dim(a.dim())
}

fn weighted_pair(w_prev: &ModelParams, w_local: &ModelParams, eps: f64) -> ModelParams {
    let denom = 1.0 + eps;
    ModelParams::from_finite(
        w_prev
            .values()
            .iter()
            .zip(w_local.values())
            .map(|(g, l)| (g + eps * l) / denom)
            .collect(),
    )
}

/// `w_G^t = (w_G^{t-1} + ε · w_L^t) / (1 + ε)`.
pub fn aggregate_async(w_global_prev: &ModelParams, w_local: &ModelParams, eps: ScalingFactor) -> Result<ModelParams> {
    check_pair(w_global_prev, w_local)?;
    Ok(weighted_pair(w_global_prev, w_local, eps.value()))
}

/// The asynchronous rule with a fixed, caller-chosen weight.
pub fn aggregate_static(w_global_prev: &ModelParams, w_local: &ModelParams, eps_static: f64) -> Result<ModelParams> {
    if !(eps_static > 0.0 && eps_static.is_finite()) {
        return Err(Error::contract("static scaling factor must be positive and finite"));
    }
    check_pair(w_global_prev, w_local)?;
    Ok(weighted_pair(w_global_prev, w_local, eps_static))
}

/// Sample-size-weighted mean of `models`.
pub fn aggregate_fedavg(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::contract("federated averaging needs at least one model"))?;
    if models.len() != sizes.len() {
        return Err(Error::contract("one sample count per model is required"));
    }
    if sizes.contains(&0) {
        return Err(Error::contract("sample counts must be positive"));
    }
    for m in &models[1..] {
        check_pair(first, m)?;
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let mut out = vec![0.0; first.dim()];
    for (m, &n) in models.iter().zip(sizes) {
        let w = n as f64 / total;
        for (o, v) in out.iter_mut().zip(m.values()) {
            *o += w * v;
        }
    }
    Ok(ModelParams::from_finite(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DefensePolicy {
    #[default]
    Off,
    /// Discard a local model whose accuracy is below `theta` times the
    /// current global accuracy.
    ThresholdFraction(f64),
}

impl DefensePolicy {
    pub fn threshold(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::config("attack.defense_theta", "must lie in [0, 1]"));
        }
        Ok(DefensePolicy::ThresholdFraction(theta))
    }

    pub fn theta(&self) -> Option<f64> {
        match self {
            DefensePolicy::Off => None,
            DefensePolicy::ThresholdFraction(t) => Some(*t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Discard,
}

/// Accept iff `acc_local >= theta * acc_global_prev`; ties are accepted.
pub fn defense_filter(acc_local: f64, acc_global_prev: f64, policy: DefensePolicy) -> Verdict {
    match policy {
        DefensePolicy::Off => Verdict::Accept,
        DefensePolicy::ThresholdFraction(theta) => {
            if acc_local >= theta * acc_global_prev {
                Verdict::Accept
            } else {
                Verdict::Discard
            }
        }
    }
}

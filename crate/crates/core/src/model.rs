//! Synthetic data and a multinomial logistic-regression classifier over flat
//! parameter vectors.
//!
//! Parameters are laid out as a row-major `classes × features` weight matrix
//! followed by `classes` biases, so a model for `f` features and `C` classes
//! has dimension `C * (f + 1)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Flat real-valued model parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("parameter {i} is not finite")));
        }
        Ok(ModelParams(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    /// Wraps values produced by arithmetic on finite inputs.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ModelParams(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Canonical serialization: each value as little-endian IEEE-754 bits.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

/// Labelled samples. `sample_ids` identify samples across a partition so that
/// disjointness between node datasets can be checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    sample_ids: Vec<u64>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, num_features: usize, num_classes: usize) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(features, labels, ids, num_features, num_classes)
    }

    pub fn with_ids(
        features: Vec<f64>,
        labels: Vec<usize>,
        sample_ids: Vec<u64>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::contract("dataset needs at least one feature and one class"));
        }
        if features.len() != labels.len() * num_features || sample_ids.len() != labels.len() {
            return Err(Error::contract("feature matrix, labels and ids disagree in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range")));
        }
        Ok(Dataset {
            features,
            labels,
            sample_ids,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    /// Dimension of a classifier over this dataset's feature space.
    pub fn param_dim(&self) -> usize {
        param_dim(self.num_features, self.num_classes)
    }

    /// Contiguous slice `[start, end)` of samples.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let f = self.num_features;
        Dataset {
            features: self.features[start * f..end * f].to_vec(),
            labels: self.labels[start..end].to_vec(),
            sample_ids: self.sample_ids[start..end].to_vec(),
            num_features: f,
            num_classes: self.num_classes,
        }
    }

    /// Splits into consecutive disjoint chunks of the given sizes.
    pub fn partition(&self, sizes: &[usize]) -> Result<Vec<Dataset>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::contract(format!(
                "partition needs {total} samples, dataset has {}",
                self.len()
            )));
        }
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&size| {
                let part = self.slice(start, start + size);
                start += size;
                part
            })
            .collect())
    }

    /// Holds out the trailing `round(n * test_fraction)` samples (at least one
    /// on each side when `n >= 2`) and returns `(train, test)`.
    pub fn split_holdout(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || self.len() < 2 {
            return Err(Error::contract("holdout needs n >= 2 and fraction in [0, 1)"));
        }
        let n = self.len();
        let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        Ok((self.slice(0, n - test), self.slice(n - test, n)))
    }
}

pub fn param_dim(num_features: usize, num_classes: usize) -> usize {
    num_classes * (num_features + 1)
}

/// Local training hyper-parameters: epochs `E`, learning rate `η` and batch
/// size `B` in samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 1500,
        }
    }
}

/// Shape of a synthetic Gaussian-blob dataset.
///
/// Class `c` is centred at `separation · (±e_{c mod f})`, the sign flipping
/// every `f` classes, with unit isotropic noise. When `anisotropy > 1` every
/// sample is additionally passed through a fixed random rotation followed by
/// per-feature scales growing geometrically from `1 / anisotropy` to 1; the
/// Bayes-optimal accuracy is unchanged but gradient descent becomes
/// ill-conditioned and converges over many epochs instead of one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub anisotropy: f64,
}

impl SyntheticSpec {
    pub fn new(samples: usize, features: usize, classes: usize, separation: f64) -> Self {
        SyntheticSpec {
            samples,
            features,
            classes,
            separation,
            anisotropy: 1.0,
        }
    }

    pub fn with_anisotropy(mut self, anisotropy: f64) -> Self {
        self.anisotropy = anisotropy;
        self
    }
}

/// Generates a class-balanced Gaussian-blob dataset. Identical `(seed, spec)`
/// always yields a bit-identical dataset.
pub fn generate_synthetic_dataset(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        samples: n,
        features: f,
        classes,
        separation,
        anisotropy,
    } = *spec;
    if f == 0 {
        return Err(Error::config("data.features", "must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::config("data.classes", "must be at least 2"));
    }
    if n < classes {
        return Err(Error::config("data.samples", "must be at least the class count"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("data.separation", "must be finite and non-negative"));
    }
    if !(anisotropy >= 1.0 && anisotropy.is_finite()) {
        return Err(Error::config("data.anisotropy", "must be finite and at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing = (anisotropy > 1.0).then(|| random_orthogonal(f, &mut rng));
    let scales: Vec<f64> = (0..f)
        .map(|j| {
            if f == 1 {
                1.0
            } else {
                anisotropy.powf(j as f64 / (f - 1) as f64 - 1.0)
            }
        })
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * f);
    let mut z = vec![0.0; f];
    for &label in &labels {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let sign = if (label / f) % 2 == 0 { 1.0 } else { -1.0 };
        z[label % f] += sign * separation;
        match &mixing {
            None => features.extend_from_slice(&z),
            Some(rot) => {
                for (j, scale) in scales.iter().enumerate() {
                    let row = &rot[j * f..(j + 1) * f];
                    let mixed: f64 = row.iter().zip(&z).map(|(r, x)| r * x).sum();
                    features.push(scale * mixed);
                }
            }
        }
    }
    Dataset::new(features, labels, f, classes)
}

/// Row-major `f × f` orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn random_orthogonal(f: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(f);
    while rows.len() < f {
        let mut v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, a) in v.iter_mut().zip(r) {
                *x -= dot * a;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

fn check_compatible(params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    params.check_dim(data.param_dim())
}

fn logits_into(params: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let f = x.len();
    let bias = &params[classes * f..];
    for c in 0..classes {
        let row = &params[c * f..(c + 1) * f];
        out[c] = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[c];
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Index of the largest logit; ties resolve to the lowest class.
fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (c, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = c;
        }
    }
    best
}

/// Mean cross-entropy and its gradient over the samples at `indices`.
fn batch_loss_and_gradient(params: &[f64], data: &Dataset, indices: &[usize], grad: &mut [f64]) -> f64 {
    let classes = data.num_classes();
    let f = data.num_features();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;
    for &i in indices {
        let x = data.sample(i);
        let y = data.label(i);
        logits_into(params, x, classes, &mut logits);
        let lse = log_sum_exp(&logits);
        loss += lse - logits[y];
        for c in 0..classes {
            let residual = (logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            let row = &mut grad[c * f..(c + 1) * f];
            for (g, v) in row.iter_mut().zip(x) {
                *g += residual * v;
            }
            grad[classes * f + c] += residual;
        }
    }
    let scale = 1.0 / indices.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    loss * scale
}

/// Mean cross-entropy over the full dataset and its analytic gradient.
pub fn loss_and_gradient(params: &ModelParams, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    check_compatible(params, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; params.dim()];
    let loss = batch_loss_and_gradient(params.values(), data, &indices, &mut grad);
    Ok((loss, grad))
}

/// Runs `cfg.epochs` passes of mini-batch gradient descent from `start`.
///
/// With `batch_size >= n` every step uses the full dataset and `rng_seed` is
/// unused; otherwise the sample order is reshuffled each epoch from a
/// generator seeded with `rng_seed`.
pub fn local_train(start: &ModelParams, data: &Dataset, cfg: &TrainConfig, rng_seed: u64) -> Result<ModelParams> {
    check_compatible(start, data)?;
    cfg.validate()?;
    let mut params = start.values().to_vec();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let full_batch = cfg.batch_size >= data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    for _ in 0..cfg.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            batch_loss_and_gradient(&params, data, batch, &mut grad);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::contract("training diverged to non-finite parameters"));
    }
    Ok(ModelParams::from_finite(params))
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    check_compatible(params, data)?;
    let mut logits = vec![0.0; data.num_classes()];
    let correct = (0..data.len())
        .filter(|&i| {
            logits_into(params.values(), data.sample(i), data.num_classes(), &mut logits);
            argmax(&logits) == data.label(i)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean per-sample cross-entropy `h_k(w) = (1/n_k) Σ ℓ_i(w)`.
pub fn local_loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    check_compatible(params, data)?;
    let mut logits = vec![0.0; data.num_classes()];
    let total: f64 = (0..data.len())
        .map(|i| {
            logits_into(params.values(), data.sample(i), data.num_classes(), &mut logits);
            // lse >= max logit, so each term is non-negative up to rounding.
            (log_sum_exp(&logits) - logits[data.label(i)]).max(0.0)
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Central objective `F = Σ_k (ε_k / K) · h_k`.
pub fn global_objective(epsilons: &[f64], losses: &[f64], k: usize) -> Result<f64> {
    if k == 0 || epsilons.len() != k || losses.len() != k {
        return Err(Error::contract(format!(
            "global objective needs {k} epsilons and losses, got {} and {}",
            epsilons.len(),
            losses.len()
        )));
    }
    if epsilons.iter().any(|&e| e.is_nan() || e <= 0.0) {
        return Err(Error::contract("scaling factors must be positive"));
    }
    let kf = k as f64;
    Ok(epsilons.iter().zip(losses).map(|(e, h)| e / kf * h).sum())
}

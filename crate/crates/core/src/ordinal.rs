//! Ordinal labels as extended binary tasks, the rank-consistent head, and the
//! importance-weighted binary cross-entropy over those tasks.
//!
//! A label of rank `r` on a scale of `m` levels becomes `m − 1` binary targets
//! "is rank > k?", i.e. `r` leading ones followed by zeros. The head shares a
//! single projection across all tasks and only varies a bias per task; the
//! biases are forced to be non-increasing, so the per-task probabilities are
//! non-increasing in `k` for every input and the decoded rank is always the
//! length of a clean prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// The probability assigned to a task's target is floored at `PROB_EPS`, which
/// caps each task's cross-entropy at `−ln PROB_EPS`.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_LEVELS: usize = 9;
/// Initial value of every bias decrement.
pub const INIT_DECREMENT: f64 = 0.1;

/// Number of ordinal levels and the rank → clinical score map (`0.5` per rank).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankScale {
    m: usize,
}

impl RankScale {
    pub const SCORE_STEP: f64 = 0.5;

    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain(format!(
                "a rank scale needs at least 2 levels, got {m}"
            )));
        }
        Ok(Self { m })
    }

    pub fn levels(&self) -> usize {
        self.m
    }

    /// Number of binary tasks, `m − 1`.
    pub fn tasks(&self) -> usize {
        self.m - 1
    }

    pub fn score_of_rank(&self, rank: usize) -> f64 {
        rank as f64 * Self::SCORE_STEP
    }

    pub fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.m {
            return Err(Error::Domain(format!(
                "rank {rank} outside 0..={} for a {}-level scale",
                self.m - 1,
                self.m
            )));
        }
        Ok(())
    }
}

impl Default for RankScale {
    fn default() -> Self {
        Self { m: DEFAULT_LEVELS }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdinalLabel {
    rank: usize,
    extended: Vec<u8>,
}

impl OrdinalLabel {
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The `m − 1` binary targets: `extended[k] == 1` iff `k < rank`.
    pub fn extended(&self) -> &[u8] {
        &self.extended
    }
}

pub fn encode_label(rank: usize, scale: RankScale) -> Result<OrdinalLabel> {
    scale.check_rank(rank)?;
    let extended = (0..scale.tasks()).map(|k| u8::from(k < rank)).collect();
    Ok(OrdinalLabel { rank, extended })
}

/// Counts the task probabilities strictly above `threshold`.
pub fn decode_rank(probabilities: &[f64], threshold: f64) -> Result<usize> {
    if let Some((k, p)) = probabilities
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::Domain(format!(
            "task probability {p} at index {k} is outside [0, 1]"
        )));
    }
    Ok(probabilities.iter().filter(|&&p| p > threshold).count())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `[0, ∞)`; `0` maps to `-∞`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y == 0.0 {
        f64::NEG_INFINITY
    } else if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Shared projection plus monotone per-task biases.
///
/// The decrements between consecutive biases are stored as free parameters
/// passed through softplus, so every parameter value yields a non-increasing
/// bias sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CoralHead<T> {
    pub projection: Vec<T>,
    pub bias_base: T,
    /// Unconstrained parameters; `decrement[k] = softplus(decrement_raw[k])`.
    pub decrement_raw: Vec<T>,
}

impl<T: Real> CoralHead<T> {
    /// Zero projection, base bias `0`, every decrement [`INIT_DECREMENT`].
    /// [`crate::net::BackboneParams::init`] draws the projection afterwards.
    pub fn new(feature_dim: usize, scale: RankScale) -> Self {
        let raw = T::from_f64_lossy(softplus_inverse(INIT_DECREMENT));
        Self {
            projection: vec![T::zero(); feature_dim],
            bias_base: T::zero(),
            decrement_raw: vec![raw; scale.tasks() - 1],
        }
    }

    pub fn from_decrements(projection: Vec<T>, bias_base: T, decrements: &[T]) -> Result<Self> {
        if let Some(d) = decrements.iter().find(|d| !(**d >= T::zero())) {
            return Err(Error::Domain(format!(
                "bias decrement {d:?} must be non-negative"
            )));
        }
        Ok(Self {
            projection,
            bias_base,
            decrement_raw: decrements
                .iter()
                .map(|d| T::from_f64_lossy(softplus_inverse(d.as_f64())))
                .collect(),
        })
    }

    pub fn tasks(&self) -> usize {
        self.decrement_raw.len() + 1
    }

    pub fn decrements(&self) -> Vec<T> {
        self.decrement_raw
            .iter()
            .map(|r| T::from_f64_lossy(softplus(r.as_f64())))
            .collect()
    }

    /// Realized biases `b_0 = base`, `b_k = b_{k−1} − decrement[k−1]`.
    pub fn biases(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.tasks());
        let mut b = self.bias_base;
        out.push(b);
        for d in self.decrements() {
            b = b - d;
            out.push(b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.projection.len() + 1 + self.decrement_raw.len()
    }
}

/// Accumulated parameter gradients of a [`CoralHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad<T> {
    pub projection: Vec<T>,
    pub bias_base: T,
    pub decrement_raw: Vec<T>,
}

impl<T: Real> HeadGrad<T> {
    pub fn zeros_like(head: &CoralHead<T>) -> Self {
        Self {
            projection: vec![T::zero(); head.projection.len()],
            bias_base: T::zero(),
            decrement_raw: vec![T::zero(); head.decrement_raw.len()],
        }
    }
}

fn shared_logit<T: Real>(feature: &[T], head: &CoralHead<T>) -> Result<T> {
    if feature.len() != head.projection.len() {
        return Err(Error::Shape(format!(
            "feature length {} does not match head projection length {}",
            feature.len(),
            head.projection.len()
        )));
    }
    let dot: f64 = feature
        .iter()
        .zip(&head.projection)
        .map(|(f, w)| f.as_f64() * w.as_f64())
        .sum();
    Ok(T::from_f64_lossy(dot))
}

/// `logit_k = ⟨projection, feature⟩ + b_k`.
pub fn head_logits<T: Real>(feature: &[T], head: &CoralHead<T>) -> Result<Vec<T>> {
    let z = shared_logit(feature, head)?;
    Ok(head.biases().into_iter().map(|b| z + b).collect())
}

/// Back-propagates `d loss / d logits` through the head.
///
/// Accumulates into `grad` and returns `d loss / d feature`.
pub fn head_backward<T: Real>(
    feature: &[T],
    head: &CoralHead<T>,
    grad_logits: &[T],
    grad: &mut HeadGrad<T>,
) -> Result<Vec<T>> {
    if grad_logits.len() != head.tasks() {
        return Err(Error::Shape(format!(
            "logit gradient length {} does not match {} head tasks",
            grad_logits.len(),
            head.tasks()
        )));
    }
    if feature.len() != head.projection.len() {
        return Err(Error::Shape(format!(
            "feature length {} does not match head projection length {}",
            feature.len(),
            head.projection.len()
        )));
    }
    let total: T = grad_logits.iter().copied().sum();
    for (g, f) in grad.projection.iter_mut().zip(feature) {
        *g = *g + *f * total;
    }
    grad.bias_base = grad.bias_base + total;
    // decrement j lowers every bias b_k with k > j
    let mut suffix = T::zero();
    for j in (0..head.decrement_raw.len()).rev() {
        suffix = suffix + grad_logits[j + 1];
        let dsoftplus = T::from_f64_lossy(sigmoid(head.decrement_raw[j].as_f64()));
        grad.decrement_raw[j] = grad.decrement_raw[j] - suffix * dsoftplus;
    }
    Ok(head.projection.iter().map(|w| *w * total).collect())
}

/// Per-task loss weights, normalized so the largest is `1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    lambda: Vec<f64>,
}

impl TaskWeights {
    pub fn uniform(scale: RankScale) -> Self {
        Self {
            lambda: vec![1.0; scale.tasks()],
        }
    }

    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Domain(format!(
                "task weights must be finite and non-negative: {lambda:?}"
            )));
        }
        let max = lambda.iter().copied().fold(0.0f64, f64::max);
        if max <= 0.0 {
            return Err(Error::Domain("at least one task weight must be positive".into()));
        }
        Ok(Self {
            lambda: lambda.into_iter().map(|l| l / max).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambda
    }
}

/// Importance weights from a rank histogram of the training split.
///
/// `N_k` is the number of samples with target 1 at task `k` (rank > k),
/// floored at 1; `λ_k = sqrt(N_k) / max_j sqrt(N_j)`.
pub fn task_weights_from_counts(label_histogram: &[u64]) -> Result<TaskWeights> {
    if label_histogram.len() < 2 {
        return Err(Error::Domain(format!(
            "histogram needs at least 2 levels, got {}",
            label_histogram.len()
        )));
    }
    if label_histogram.iter().all(|&c| c == 0) {
        return Err(Error::Domain("label histogram is all zero".into()));
    }
    let tasks = label_histogram.len() - 1;
    let counts: Vec<f64> = (0..tasks)
        .map(|k| {
            let positives: u64 = label_histogram[k + 1..].iter().sum();
            (positives.max(1) as f64).sqrt()
        })
        .collect();
    TaskWeights::new(counts)
}

fn check_loss_shapes(logits: usize, label: &OrdinalLabel, weights: &TaskWeights) -> Result<()> {
    if logits != label.extended.len() || logits != weights.lambda.len() {
        return Err(Error::Shape(format!(
            "logits ({logits}), label tasks ({}) and weights ({}) must have equal length",
            label.extended.len(),
            weights.lambda.len()
        )));
    }
    Ok(())
}

fn clamped_bce(logit: f64, target: u8) -> f64 {
    // -ln sigmoid(z) = softplus(-z), -ln(1 - sigmoid(z)) = softplus(z)
    let nll = if target == 1 { softplus(-logit) } else { softplus(logit) };
    nll.min(-PROB_EPS.ln())
}

/// `Σ_k λ_k · BCE(sigmoid(logit_k), extended_k)`.
pub fn coral_loss<T: Real>(logits: &[T], label: &OrdinalLabel, weights: &TaskWeights) -> Result<f64> {
    check_loss_shapes(logits.len(), label, weights)?;
    Ok(logits
        .iter()
        .zip(&label.extended)
        .zip(&weights.lambda)
        .map(|((z, t), l)| l * clamped_bce(z.as_f64(), *t))
        .sum())
}

/// Loss together with its gradient `λ_k (sigmoid(logit_k) − t_k)`.
///
/// The gradient is exact wherever the probability clamp is inactive
/// (|logit| below roughly 16).
pub fn coral_loss_with_grad<T: Real>(
    logits: &[T],
    label: &OrdinalLabel,
    weights: &TaskWeights,
) -> Result<(f64, Vec<T>)> {
    let loss = coral_loss(logits, label, weights)?;
    let grad = logits
        .iter()
        .zip(&label.extended)
        .zip(&weights.lambda)
        .map(|((z, t), l)| T::from_f64_lossy(l * (sigmoid(z.as_f64()) - f64::from(*t))))
        .collect();
    Ok((loss, grad))
}

pub fn task_probabilities<T: Real>(logits: &[T]) -> Vec<f64> {
    logits.iter().map(|z| sigmoid(z.as_f64())).collect()
}

/// Mean of the per-task probabilities, a bounded severity summary in `[0, 1]`.
pub fn tremor_probability(probabilities: &[f64]) -> f64 {
    probabilities.iter().sum::<f64>() / probabilities.len() as f64
}

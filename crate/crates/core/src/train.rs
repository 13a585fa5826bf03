//! Adam optimization of the ordinal network and of the frequency-classification
//! surrogate used to pretrain the encoder.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_pretrained, to_checkpoint, Checkpoint, CheckpointKind, TrainingRecord, TransferPolicy, TransferReport};
use crate::dataset::{epoch_order, load_tensors, CorpusManifest, TensorSpec};
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::net::{Architecture, BackboneParams, Gradients, Mode};
use crate::ordinal::{
    coral_loss_with_grad, decode_rank, encode_label, task_probabilities, task_weights_from_counts, RankScale,
    TaskWeights, DEFAULT_THRESHOLD,
};
use crate::synth::frequency_bin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    None,
    Freeze,
    Finetune,
}

impl TransferMode {
    pub fn policy(self) -> Option<TransferPolicy> {
        match self {
            TransferMode::None => None,
            TransferMode::Freeze => Some(TransferPolicy::Freeze),
            TransferMode::Finetune => Some(TransferPolicy::Finetune),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub transfer: TransferMode,
    /// Test-set evaluation (and a log record) every this many epochs; the last epoch is always logged.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            transfer: TransferMode::None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("epsilon must be > 0 and weight decay ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Domain("epochs, batch size and log cadence must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Adam with `f64` moment estimates over a fixed sequence of `f32` buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            weight_decay: config.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameter buffers, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::State("optimizer reused with a different parameter layout".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape("gradient buffer length differs from its parameter".into()));
            }
            for i in 0..p.len() {
                let theta = f64::from(p[i]);
                let gi = f64::from(g[i]) + self.weight_decay * theta;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = (theta - update) as f32;
            }
        }
        Ok(())
    }
}

/// Flattened network inputs with integer targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<usize>,
    pub subjects: Vec<u32>,
}

/// What a [`LabeledSet`] target means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Rank,
    FrequencyBin(usize),
}

impl LabeledSet {
    pub fn from_manifest(
        manifest: &CorpusManifest,
        spec: &TensorSpec,
        cache_dir: Option<&Path>,
        target: Target,
    ) -> Result<Self> {
        let inputs = load_tensors(manifest, spec, cache_dir)?
            .into_iter()
            .map(|t| t.data().to_vec())
            .collect();
        let targets = manifest
            .clips
            .iter()
            .map(|c| match target {
                Target::Rank => c.rank,
                Target::FrequencyBin(bins) => frequency_bin(c.spec.frequency, bins),
            })
            .collect();
        Ok(Self {
            inputs,
            targets,
            subjects: manifest.clips.iter().map(|c| c.subject).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, ids: &[usize]) -> Vec<Vec<f32>> {
        ids.iter().map(|&i| self.inputs[i].clone()).collect()
    }
}

pub fn check_subjects_disjoint(a: &LabeledSet, b: &LabeledSet) -> Result<()> {
    let sa: BTreeSet<u32> = a.subjects.iter().copied().collect();
    let sb: BTreeSet<u32> = b.subjects.iter().copied().collect();
    let shared: Vec<u32> = sa.intersection(&sb).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SubjectOverlap { subjects: shared })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-clip loss over the epoch's minibatches.
    pub train_loss: f64,
    /// Squared rank error of the train-mode minibatch predictions.
    pub train_mse: f64,
    pub train_mse_score: f64,
    pub test_mse: f64,
    pub test_mse_score: f64,
    pub test_mae: f64,
    pub parameter_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_mse,test_mse,train_mse_score,test_mse_score,test_mae,parameter_norm\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_mse, r.test_mse, r.train_mse_score, r.test_mse_score, r.test_mae, r.parameter_norm
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_params: BackboneParams<f32>,
    pub final_step: u64,
    pub best_params: BackboneParams<f32>,
    pub best_epoch: usize,
    pub best_step: u64,
    pub log: TrainLog,
    pub weights: TaskWeights,
    pub transfer: Option<TransferReport>,
    /// Wall-clock seconds per epoch. Kept apart from the log so logs stay reproducible.
    pub seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self, seed: u64) -> Checkpoint {
        to_checkpoint(&self.best_params, CheckpointKind::Full, TrainingRecord { step: self.best_step, seed })
    }

    pub fn final_checkpoint(&self, seed: u64) -> Checkpoint {
        to_checkpoint(&self.final_params, CheckpointKind::Full, TrainingRecord { step: self.final_step, seed })
    }
}

fn rank_mse(pred: &[usize], truth: &[usize]) -> (f64, f64) {
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (*p as f64 - *t as f64).powi(2)).sum();
    let sa: f64 = pred.iter().zip(truth).map(|(p, t)| p.abs_diff(*t) as f64).sum();
    let n = pred.len().max(1) as f64;
    (se / n, sa / n)
}

/// Ordinal training with importance weights from the training histogram.
///
/// `pretrained` is required when `config.transfer` is not `None`.
pub fn train_ordinal(
    train: &LabeledSet,
    test: &LabeledSet,
    arch: Architecture,
    scale: RankScale,
    config: &TrainConfig,
    pretrained: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_subjects_disjoint(train, test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Domain("training and test sets must be non-empty".into()));
    }
    let labels = train
        .targets
        .iter()
        .map(|&r| encode_label(r, scale))
        .collect::<Result<Vec<_>>>()?;
    for &r in &test.targets {
        scale.check_rank(r)?;
    }
    let mut histogram = vec![0u64; scale.levels()];
    for &r in &train.targets {
        histogram[r] += 1;
    }
    let weights = task_weights_from_counts(&histogram)?;

    let (mut params, transfer) = match (config.transfer.policy(), pretrained) {
        (Some(policy), Some(ck)) => {
            let (p, report) = load_pretrained(ck, arch, scale, policy, config.seed)?;
            (p, Some(report))
        }
        (None, None) => (BackboneParams::init(arch, scale, config.seed)?, None),
        (Some(_), None) => {
            return Err(Error::Domain("a transfer policy needs a pretrained checkpoint".into()))
        }
        (None, Some(_)) => {
            return Err(Error::Domain("a pretrained checkpoint needs a transfer policy".into()))
        }
    };

    let mut adam = Adam::new(config);
    let mut log = TrainLog::default();
    let mut seconds = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, u64, BackboneParams<f32>)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(train.len(), config.seed, epoch as u64);
        let (mut loss_sum, mut preds, mut truth) = (0.0f64, Vec::new(), Vec::new());
        for ids in order.chunks(config.batch_size) {
            let (logits, cache) = params.forward(&train.batch(ids), Mode::Train)?;
            let inv_b = 1.0 / ids.len() as f32;
            let mut dlogits = Vec::with_capacity(ids.len());
            for (z, &i) in logits.iter().zip(ids) {
                let (loss, g) = coral_loss_with_grad(z, &labels[i], &weights)?;
                loss_sum += loss;
                dlogits.push(g.into_iter().map(|v| v * inv_b).collect::<Vec<f32>>());
                preds.push(decode_rank(&task_probabilities(z), DEFAULT_THRESHOLD)?);
                truth.push(train.targets[i]);
            }
            let grads = params.backward_with(&cache, &dlogits, false)?;
            let frozen = params.frozen_blocks;
            adam.step(params.trainable_mut(), grads.slices(frozen))?;
        }
        if epoch % config.log_every == 0 || epoch == config.epochs {
            let (train_mse, _) = rank_mse(&preds, &truth);
            let test_pred: Vec<usize> = predict(&params, &test.inputs)?.iter().map(|p| p.rank).collect();
            let (test_mse, test_mae) = rank_mse(&test_pred, &test.targets);
            let step = RankScale::SCORE_STEP * RankScale::SCORE_STEP;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_mse,
                train_mse_score: train_mse * step,
                test_mse,
                test_mse_score: test_mse * step,
                test_mae,
                parameter_norm: params.parameter_norm(),
            };
            if !record.train_loss.is_finite() || !record.parameter_norm.is_finite() {
                return Err(Error::Domain(format!("training diverged at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(mse, ..)| test_mse < *mse) {
                best = Some((test_mse, epoch, adam.steps(), params.clone()));
            }
            on_epoch(&record);
            log.records.push(record);
        }
        seconds.push(started.elapsed().as_secs_f64());
    }
    let (_, best_epoch, best_step, best_params) = best.expect("the last epoch is always logged");
    Ok(TrainOutcome {
        final_step: adam.steps(),
        final_params: params,
        best_params,
        best_epoch,
        best_step,
        log,
        weights,
        transfer,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Full network whose encoder blocks were trained; the last block and head are untouched.
    pub params: BackboneParams<f32>,
    pub steps: u64,
    pub heldout_accuracy: f64,
    pub log: Vec<PretrainRecord>,
    pub seconds: Vec<f64>,
}

impl PretrainOutcome {
    pub fn encoder_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = to_checkpoint(&self.params, CheckpointKind::Encoder, TrainingRecord { step: self.steps, seed });
        ck.set_meta("pretrain.heldout_accuracy", self.heldout_accuracy);
        ck
    }
}

pub fn pretrain_log_csv(log: &[PretrainRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_accuracy,heldout_accuracy\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.train_accuracy, r.heldout_accuracy);
    }
    s
}

/// Softmax classifier on globally average-pooled encoder features.
struct PoolHead {
    classes: usize,
    channels: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl PoolHead {
    fn pool(&self, act: &[f32]) -> Vec<f64> {
        let spatial = act.len() / self.channels;
        act.chunks_exact(spatial)
            .map(|c| c.iter().map(|v| f64::from(*v)).sum::<f64>() / spatial as f64)
            .collect()
    }

    fn logits(&self, feat: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                f64::from(self.bias[k])
                    + self.weight[k * self.channels..(k + 1) * self.channels]
                        .iter()
                        .zip(feat)
                        .map(|(w, f)| f64::from(*w) * f)
                        .sum::<f64>()
            })
            .collect()
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Trains the encoder blocks plus a temporary pooled softmax head to classify
/// frequency bins. Targets of both sets are bin indices below `bins`.
pub fn pretrain_frequency(
    train: &LabeledSet,
    heldout: &LabeledSet,
    bins: usize,
    arch: Architecture,
    scale: RankScale,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    config.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Domain("pretraining sets must be non-empty".into()));
    }
    if let Some(t) = train.targets.iter().chain(&heldout.targets).find(|&&t| t >= bins) {
        return Err(Error::Domain(format!("frequency bin {t} outside 0..{bins}")));
    }
    let distinct: BTreeSet<usize> = train.targets.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Domain(format!(
            "frequency pretraining needs at least 2 occupied bins, training set has {}",
            distinct.len()
        )));
    }
    let mut params = BackboneParams::<f32>::init(arch, scale, config.seed)?;
    let enc = params.arch.encoder_blocks();
    let channels = params.blocks[enc - 1].spec.out_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let bound = 1.0 / (channels as f32).sqrt();
    let mut head = PoolHead {
        classes: bins,
        channels,
        weight: (0..bins * channels).map(|_| rng.random_range(-bound..bound)).collect(),
        bias: vec![0.0; bins],
    };

    let classify = |params: &BackboneParams<f32>, head: &PoolHead, set: &LabeledSet| -> Result<f64> {
        let mut correct = 0usize;
        for ids in (0..set.len()).collect::<Vec<_>>().chunks(8) {
            let cache = params.forward_blocks(&set.batch(ids), Mode::Infer, enc)?;
            for (act, &i) in cache.output().iter().zip(ids) {
                correct += usize::from(argmax(&head.logits(&head.pool(act))) == set.targets[i]);
            }
        }
        Ok(correct as f64 / set.len() as f64)
    };

    let mut adam = Adam::new(config);
    let mut log = Vec::new();
    let mut seconds = Vec::new();
    let mut heldout_accuracy = 0.0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for ids in epoch_order(train.len(), config.seed, epoch as u64).chunks(config.batch_size) {
            let cache = params.forward_blocks(&train.batch(ids), Mode::Train, enc)?;
            params.apply_running_stats(&cache);
            let inv_b = 1.0 / ids.len() as f64;
            let mut dweight = vec![0.0f32; head.weight.len()];
            let mut dbias = vec![0.0f32; bins];
            let mut dact = Vec::with_capacity(ids.len());
            for (act, &i) in cache.output().iter().zip(ids) {
                let feat = head.pool(act);
                let z = head.logits(&feat);
                let p = softmax(&z);
                let target = train.targets[i];
                loss_sum += -p[target].max(1e-300).ln();
                correct += usize::from(argmax(&z) == target);
                let dz: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(k, pk)| (pk - f64::from(u8::from(k == target))) * inv_b)
                    .collect();
                let mut dfeat = vec![0.0f64; channels];
                for k in 0..bins {
                    dbias[k] += dz[k] as f32;
                    for c in 0..channels {
                        dweight[k * channels + c] += (dz[k] * feat[c]) as f32;
                        dfeat[c] += dz[k] * f64::from(head.weight[k * channels + c]);
                    }
                }
                let spatial = act.len() / channels;
                dact.push(
                    dfeat
                        .iter()
                        .flat_map(|g| std::iter::repeat_n((g / spatial as f64) as f32, spatial))
                        .collect::<Vec<f32>>(),
                );
            }
            let mut grads = Gradients::zeros_like(&params);
            params.backward_blocks(&cache, dact, &mut grads, false)?;
            let mut ps: Vec<&mut [f32]> = Vec::new();
            for b in &mut params.blocks[..enc] {
                ps.push(&mut b.weight);
                ps.push(&mut b.bias);
                match &mut b.bn {
                    Some(bn) => {
                        ps.push(&mut bn.scale);
                        ps.push(&mut bn.shift);
                    }
                    None => {
                        ps.push(&mut []);
                        ps.push(&mut []);
                    }
                }
            }
            ps.push(&mut head.weight);
            ps.push(&mut head.bias);
            let mut gs: Vec<&[f32]> = Vec::new();
            for g in &grads.blocks[..enc] {
                gs.extend([&g.weight[..], &g.bias[..], &g.bn_scale[..], &g.bn_shift[..]]);
            }
            gs.push(&dweight);
            gs.push(&dbias);
            adam.step(ps, gs)?;
        }
        if epoch % config.log_every == 0 || epoch == config.epochs {
            heldout_accuracy = classify(&params, &head, heldout)?;
            let record = PretrainRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                heldout_accuracy,
            };
            if !record.train_loss.is_finite() {
                return Err(Error::Domain(format!("pretraining diverged at epoch {epoch}")));
            }
            on_epoch(&record);
            log.push(record);
        }
        seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(PretrainOutcome {
        steps: adam.steps(),
        params,
        heldout_accuracy,
        log,
        seconds,
    })
}

//! Prediction, test-set metrics, the rank/probability correlation curve and
//! per-session score aggregation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_tensors, CorpusManifest, TensorSpec};
use crate::error::{Error, Result};
use crate::net::BackboneParams;
use crate::ordinal::{decode_rank, task_probabilities, tremor_probability, RankScale, DEFAULT_THRESHOLD};

const INFER_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub rank: usize,
    pub score: f64,
    pub probabilities: Vec<f64>,
    pub tremor_probability: f64,
}

/// Infer-mode predictions for flattened network inputs, in input order.
pub fn predict(params: &BackboneParams<f32>, inputs: &[Vec<f32>]) -> Result<Vec<Prediction>> {
    let chunks: Vec<Vec<Vec<f32>>> = inputs
        .par_chunks(INFER_CHUNK)
        .map(|c| params.infer(c))
        .collect::<Result<_>>()?;
    chunks
        .into_iter()
        .flatten()
        .map(|logits| {
            let probabilities = task_probabilities(&logits);
            let rank = decode_rank(&probabilities, DEFAULT_THRESHOLD)?;
            Ok(Prediction {
                rank,
                score: params.scale.score_of_rank(rank),
                tremor_probability: tremor_probability(&probabilities),
                probabilities,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub rank: usize,
    pub mean_tremor_probability: f64,
    pub count: u64,
    /// Groups holding a single clip are excluded from the trend statistic.
    pub single: bool,
}

/// Mean tremor probability per ground-truth rank; ranks without clips are omitted.
pub fn correlation_curve(truth: &[usize], tremor_probs: &[f64], levels: usize) -> Result<Vec<CorrelationRow>> {
    if truth.is_empty() {
        return Err(Error::Domain("correlation curve of an empty set".into()));
    }
    if truth.len() != tremor_probs.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} probabilities",
            truth.len(),
            tremor_probs.len()
        )));
    }
    let mut sums = vec![0.0f64; levels];
    let mut counts = vec![0u64; levels];
    for (&r, &p) in truth.iter().zip(tremor_probs) {
        if r >= levels {
            return Err(Error::Domain(format!("rank {r} outside 0..{levels}")));
        }
        sums[r] += p;
        counts[r] += 1;
    }
    Ok((0..levels)
        .filter(|&r| counts[r] > 0)
        .map(|r| CorrelationRow {
            rank: r,
            mean_tremor_probability: sums[r] / counts[r] as f64,
            count: counts[r],
            single: counts[r] == 1,
        })
        .collect())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation with average ranks for ties; `None` when undefined.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation of rank against group mean, excluding single-clip groups.
pub fn curve_spearman(rows: &[CorrelationRow]) -> Option<f64> {
    let kept: Vec<&CorrelationRow> = rows.iter().filter(|r| !r.single).collect();
    let x: Vec<f64> = kept.iter().map(|r| r.rank as f64).collect();
    let y: Vec<f64> = kept.iter().map(|r| r.mean_tremor_probability).collect();
    spearman(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub levels: usize,
    pub clips: u64,
    pub mae_rank: f64,
    pub mae_score: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_rank_counts: Vec<u64>,
    pub errors: u64,
    /// Share of errors with |Δ| = 1; `None` when there are no errors.
    pub adjacent_error_fraction: Option<f64>,
    pub correlation: Vec<CorrelationRow>,
    pub spearman: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], preds: &[Prediction], scale: RankScale) -> Result<Self> {
        let ranks: Vec<usize> = preds.iter().map(|p| p.rank).collect();
        let probs: Vec<f64> = preds.iter().map(|p| p.tremor_probability).collect();
        Self::from_ranks(truth, &ranks, &probs, scale)
    }

    pub fn from_ranks(truth: &[usize], predicted: &[usize], tremor_probs: &[f64], scale: RankScale) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Domain("cannot evaluate an empty set".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let m = scale.levels();
        let mut confusion = vec![vec![0u64; m]; m];
        let (mut abs_sum, mut correct, mut errors, mut adjacent) = (0u64, 0u64, 0u64, 0u64);
        for (&t, &p) in truth.iter().zip(predicted) {
            scale.check_rank(t)?;
            scale.check_rank(p)?;
            confusion[t][p] += 1;
            let d = t.abs_diff(p) as u64;
            abs_sum += d;
            match d {
                0 => correct += 1,
                1 => {
                    errors += 1;
                    adjacent += 1
                }
                _ => errors += 1,
            }
        }
        let n = truth.len() as f64;
        let mae_rank = abs_sum as f64 / n;
        let correlation = correlation_curve(truth, tremor_probs, m)?;
        Ok(Self {
            levels: m,
            clips: truth.len() as u64,
            mae_rank,
            mae_score: mae_rank * RankScale::SCORE_STEP,
            accuracy: correct as f64 / n,
            per_rank_counts: confusion.iter().map(|row| row.iter().sum()).collect(),
            confusion,
            errors,
            adjacent_error_fraction: (errors > 0).then(|| adjacent as f64 / errors as f64),
            spearman: curve_spearman(&correlation),
            correlation,
        })
    }

    /// MAE recomputed from the confusion matrix.
    pub fn confusion_mae(&self) -> f64 {
        let mut s = 0u64;
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                s += c * t.abs_diff(p) as u64;
            }
        }
        s as f64 / self.clips as f64
    }

    pub fn confusion_accuracy(&self) -> f64 {
        (0..self.levels).map(|i| self.confusion[i][i]).sum::<u64>() as f64 / self.clips as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clips              {}", self.clips);
        let _ = writeln!(s, "MAE (rank)         {:.4}", self.mae_rank);
        let _ = writeln!(s, "MAE (score)        {:.4}", self.mae_score);
        let _ = writeln!(s, "accuracy           {:.4}", self.accuracy);
        match self.adjacent_error_fraction {
            Some(a) => {
                let _ = writeln!(s, "adjacent errors    {a:.4} of {}", self.errors);
            }
            None => {
                let _ = writeln!(s, "adjacent errors    n/a (no errors)");
            }
        }
        match self.spearman {
            Some(r) => {
                let _ = writeln!(s, "spearman (n>1)     {r:.4}");
            }
            None => {
                let _ = writeln!(s, "spearman (n>1)     undefined");
            }
        }
        let _ = writeln!(s, "\nconfusion (rows = true rank, columns = predicted)");
        let _ = write!(s, "     ");
        for p in 0..self.levels {
            let _ = write!(s, "{p:>5}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t:>5}");
            for c in row {
                let _ = write!(s, "{c:>5}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\nrank  mean_tremor_probability  count");
        for r in &self.correlation {
            let _ = writeln!(
                s,
                "{:>4}  {:>23.4}  {:>5}{}",
                r.rank,
                r.mean_tremor_probability,
                r.count,
                if r.single { "  (single)" } else { "" }
            );
        }
        s
    }

    pub fn correlation_csv(&self) -> String {
        let mut s = String::from("rank,mean_tremor_probability,count,single\n");
        for r in &self.correlation {
            let _ = writeln!(s, "{},{},{},{}", r.rank, r.mean_tremor_probability, r.count, r.single);
        }
        s
    }
}

/// Mean decoded rank × 0.5, rounded to the nearest half point with ties up.
pub fn overall_score(ranks: &[usize], scale: RankScale) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Domain("overall score of an empty group".into()));
    }
    for &r in ranks {
        scale.check_rank(r)?;
    }
    let mean = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
    Ok((mean + 0.5).floor() * RankScale::SCORE_STEP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub path: String,
    pub subject: u32,
    pub true_rank: usize,
    #[serde(flatten)]
    pub prediction: Prediction,
}

/// Predicts every clip of `manifest` and scores the predictions.
pub fn evaluate(
    params: &BackboneParams<f32>,
    manifest: &CorpusManifest,
    spec: &TensorSpec,
    cache_dir: Option<&Path>,
) -> Result<(EvalReport, Vec<ClipPrediction>)> {
    if manifest.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty manifest".into()));
    }
    let scale = manifest.scale()?;
    if scale != params.scale {
        return Err(Error::Domain(format!(
            "checkpoint has {} levels, manifest {}",
            params.scale.levels(),
            scale.levels()
        )));
    }
    if spec.size != params.arch.input_size {
        return Err(Error::Shape(format!(
            "tensor size {} does not match the network input {}",
            spec.size, params.arch.input_size
        )));
    }
    let inputs: Vec<Vec<f32>> = load_tensors(manifest, spec, cache_dir)?
        .into_iter()
        .map(|t| t.data().to_vec())
        .collect();
    let preds = predict(params, &inputs)?;
    let truth: Vec<usize> = manifest.clips.iter().map(|c| c.rank).collect();
    let report = EvalReport::from_predictions(&truth, &preds, scale)?;
    let clips = manifest
        .clips
        .iter()
        .zip(preds)
        .map(|(c, p)| ClipPrediction {
            path: c.path.clone(),
            subject: c.subject,
            true_rank: c.rank,
            prediction: p,
        })
        .collect();
    Ok((report, clips))
}

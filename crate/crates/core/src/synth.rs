//! Synthetic tremor corpus: an anisotropic Gaussian blob oscillating along a
//! per-subject axis, with amplitude set by the severity rank.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{rank_histogram, sha256_hex, write_clip, ClipRecord, CorpusManifest, LabelKind, ManifestHeader};
use crate::error::{Error, Result};
use crate::flow::FrameGray;
use crate::ordinal::RankScale;

pub const GENERATOR: &str = "tremorank-synth/1";
pub const AMPLITUDE_PER_RANK: f64 = 1.5;
pub const FREQUENCY_RANGE: (f64, f64) = (4.0, 12.0);
pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_FRAMES: usize = 96;
pub const DEFAULT_CANVAS: usize = 128;
pub const DEFAULT_NOISE: f64 = 0.02;
pub const BACKGROUND: f64 = 0.1;
pub const PEAK: f64 = 0.8;
const SIGMA_RANGE: (f64, f64) = (6.0, 12.0);
const BASE_JITTER: f64 = 8.0;

pub fn amplitude_of_rank(rank: usize) -> f64 {
    AMPLITUDE_PER_RANK * rank as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClipSpec {
    pub subject_id: u32,
    pub rank: usize,
    /// Peak displacement from the base position, pixels.
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub fps: f64,
    /// Oscillation axis, radians from the +x axis.
    pub axis_angle: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub base_x: f64,
    pub base_y: f64,
    /// Pixels per frame.
    pub drift_x: f64,
    pub drift_y: f64,
    pub noise_sigma: f64,
    pub canvas: usize,
    pub seed: u64,
}

impl SyntheticClipSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = FREQUENCY_RANGE;
        if !(lo..=hi).contains(&self.frequency) {
            return Err(Error::Domain(format!(
                "frequency {} Hz outside [{lo}, {hi}]",
                self.frequency
            )));
        }
        if !(self.fps > 2.0 * self.frequency) {
            return Err(Error::Domain(format!(
                "fps {} violates Nyquist for {} Hz (needs > {})",
                self.fps,
                self.frequency,
                2.0 * self.frequency
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Domain(format!("amplitude {} must be finite and ≥ 0", self.amplitude)));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::Domain("blob sigmas must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Domain(format!("noise sigma {} must be ≥ 0", self.noise_sigma)));
        }
        if self.canvas < 2 {
            return Err(Error::Domain(format!("canvas {} too small", self.canvas)));
        }
        Ok(())
    }

    /// Analytic blob centre at frame `t`.
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let d = self.amplitude * (std::f64::consts::TAU * self.frequency * t / self.fps + self.phase).sin();
        (
            self.base_x + self.drift_x * t + d * self.axis_angle.cos(),
            self.base_y + self.drift_y * t + d * self.axis_angle.sin(),
        )
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

/// Renders `n_frames` frames on a `canvas × canvas` grid (pixel centres at `i + 0.5`).
pub fn render_clip(spec: &SyntheticClipSpec, n_frames: usize) -> Result<Vec<FrameGray>> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::Domain("n_frames must be positive".into()));
    }
    let n = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma > 0"));
    let gauss = |c: f64, s: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let z = (i as f64 + 0.5 - c) / s;
                (-0.5 * z * z).exp()
            })
            .collect()
    };
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let (cx, cy) = spec.center(t);
        let gx = gauss(cx, spec.sigma_x);
        let gy = gauss(cy, spec.sigma_y);
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let mut v = BACKGROUND + PEAK * gx[x] * gy[y];
                if let Some(d) = &noise {
                    v += d.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
        frames.push(FrameGray::new(n, n, data)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistogramProfile {
    Uniform,
    /// Triangular bump over the middle ranks with a small floor.
    Imbalanced,
}

impl HistogramProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            HistogramProfile::Uniform => "uniform",
            HistogramProfile::Imbalanced => "imbalanced",
        }
    }

    /// Rank probabilities (normalized).
    pub fn probabilities(self, levels: usize) -> Vec<f64> {
        let raw: Vec<f64> = match self {
            HistogramProfile::Uniform => vec![1.0; levels],
            HistogramProfile::Imbalanced => {
                let centre = (levels as f64 - 2.0) / 2.0;
                let half = levels as f64 / 2.0;
                (0..levels)
                    .map(|k| (1.0 - (k as f64 - centre).abs() / half).max(0.0) + 0.01)
                    .collect()
            }
        };
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / s).collect()
    }
}

impl std::str::FromStr for HistogramProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "imbalanced" => Ok(Self::Imbalanced),
            _ => Err(Error::Domain(format!("unknown histogram profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusOptions {
    pub subjects: usize,
    pub clips_per_subject: usize,
    pub profile: HistogramProfile,
    pub master_seed: u64,
    pub levels: usize,
    pub labels: LabelKind,
    pub n_frames: usize,
    pub fps: f64,
    pub canvas: usize,
    pub noise_sigma: f64,
    /// Upper bound on per-clip drift speed, pixels per frame.
    pub max_drift: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            subjects: 36,
            clips_per_subject: 8,
            profile: HistogramProfile::Imbalanced,
            master_seed: 0,
            levels: crate::ordinal::DEFAULT_LEVELS,
            labels: LabelKind::Rank,
            n_frames: DEFAULT_FRAMES,
            fps: DEFAULT_FPS,
            canvas: DEFAULT_CANVAS,
            noise_sigma: DEFAULT_NOISE,
            max_drift: 0.0,
        }
    }
}

struct SubjectStyle {
    frequency: f64,
    axis_angle: f64,
    sigma_x: f64,
    sigma_y: f64,
    base_x: f64,
    base_y: f64,
}

/// Draws every clip spec. Pure function of the options.
pub fn corpus_specs(opts: &CorpusOptions) -> Result<Vec<SyntheticClipSpec>> {
    if opts.subjects == 0 || opts.clips_per_subject == 0 {
        return Err(Error::Domain("subject and clip counts must be positive".into()));
    }
    let scale = RankScale::new(opts.levels)?;
    let probs = opts.profile.probabilities(scale.levels());
    let rank_dist = WeightedIndex::new(&probs).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.master_seed);
    let centre = opts.canvas as f64 / 2.0;
    let max_amp = amplitude_of_rank(scale.levels() - 1);
    let mut specs = Vec::with_capacity(opts.subjects * opts.clips_per_subject);
    for s in 0..opts.subjects {
        let style = SubjectStyle {
            frequency: rng.random_range(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1),
            axis_angle: rng.random_range(0.0..std::f64::consts::PI),
            sigma_x: rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1),
            sigma_y: rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1),
            base_x: centre + rng.random_range(-BASE_JITTER..=BASE_JITTER),
            base_y: centre + rng.random_range(-BASE_JITTER..=BASE_JITTER),
        };
        for _ in 0..opts.clips_per_subject {
            let (rank, amplitude) = match opts.labels {
                LabelKind::Rank => {
                    let r = rank_dist.sample(&mut rng);
                    (r, amplitude_of_rank(r))
                }
                LabelKind::Frequency => {
                    let a = rng.random_range(AMPLITUDE_PER_RANK..=max_amp);
                    ((a / AMPLITUDE_PER_RANK).round() as usize, a)
                }
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (drift_x, drift_y) = if opts.max_drift > 0.0 {
                (
                    rng.random_range(-opts.max_drift..=opts.max_drift),
                    rng.random_range(-opts.max_drift..=opts.max_drift),
                )
            } else {
                (0.0, 0.0)
            };
            let seed = rng.random::<u64>();
            let spec = SyntheticClipSpec {
                subject_id: s as u32,
                rank,
                amplitude,
                frequency: style.frequency,
                phase,
                fps: opts.fps,
                axis_angle: style.axis_angle,
                sigma_x: style.sigma_x,
                sigma_y: style.sigma_y,
                base_x: style.base_x,
                base_y: style.base_y,
                drift_x,
                drift_y,
                noise_sigma: opts.noise_sigma,
                canvas: opts.canvas,
                seed,
            };
            spec.validate()?;
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// Renders every clip into `dir/clips/` and writes `dir/manifest.jsonl`.
pub fn generate_corpus(opts: &CorpusOptions, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    let specs = corpus_specs(opts)?;
    let clips_dir = dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let per_subject = opts.clips_per_subject;
    let records = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let rel = format!("clips/s{:03}_c{:03}.trcl", spec.subject_id, i % per_subject);
            let frames = render_clip(&spec, opts.n_frames)?;
            write_clip(dir.join(&rel), &frames, spec.fps)?;
            Ok(ClipRecord {
                path: rel,
                subject: spec.subject_id,
                rank: spec.rank,
                seed: spec.seed,
                spec_hash: spec.hash(),
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = ManifestHeader {
        generator: GENERATOR.into(),
        master_seed: opts.master_seed,
        levels: opts.levels,
        labels: opts.labels,
        profile: opts.profile.as_str().into(),
        n_frames: opts.n_frames,
        histogram: rank_histogram(&records, opts.levels),
    };
    let manifest = CorpusManifest {
        header,
        clips: records,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Subject-disjoint split: `round(n_subjects × train_fraction)` subjects, drawn
/// by a seeded shuffle, go to the training side.
pub fn split_by_subject(
    manifest: &CorpusManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(CorpusManifest, CorpusManifest)> {
    let subjects: Vec<u32> = manifest.subjects().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::Domain(format!(
            "a subject split needs at least 2 subjects, manifest has {}",
            subjects.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Domain(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = ((subjects.len() as f64 * train_fraction).round() as usize).clamp(1, subjects.len() - 1);
    let order = crate::dataset::epoch_order(subjects.len(), seed, 0);
    let train: std::collections::BTreeSet<u32> = order[..n_train].iter().map(|&i| subjects[i]).collect();
    Ok((
        manifest.filtered(|c| train.contains(&c.subject)),
        manifest.filtered(|c| !train.contains(&c.subject)),
    ))
}

/// Frequency bin of `f` among `bins` equal-width bins over the frequency range.
pub fn frequency_bin(f: f64, bins: usize) -> usize {
    let (lo, hi) = FREQUENCY_RANGE;
    let b = ((f - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

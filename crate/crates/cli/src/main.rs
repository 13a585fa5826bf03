//! `tremorank` command-line pipelines: corpus synthesis, flow inspection,
//! pretraining, ordinal training, evaluation and prediction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tremorank::checkpoint::{from_checkpoint, Checkpoint};
use tremorank::dataset::{check_disjoint, read_clip, sha256_hex, CorpusManifest, LabelKind, TensorSpec};
use tremorank::eval::{evaluate, overall_score, predict, ClipPrediction};
use tremorank::flow::{clip_to_tensor, flow_to_rgb, horn_schunck};
use tremorank::net::{Architecture, BackboneParams};
use tremorank::ordinal::RankScale;
use tremorank::synth::{generate_corpus, split_by_subject, CorpusOptions, HistogramProfile};
use tremorank::train::{
    pretrain_frequency, pretrain_log_csv, train_ordinal, LabeledSet, Target, TrainConfig, TransferMode,
};
use tremorank::Error;

const THREADS_ENV: &str = "TREMORANK_THREADS";
const RESOLVED_CONFIG: &str = "resolved_config.json";
const ARTIFACTS: &str = "artifacts.json";
/// Wall-clock files; listed in the artifact manifest without a hash.
const VOLATILE: &[&str] = &["timing.csv"];

#[derive(Parser)]
#[command(name = "tremorank", version, about = "Ordinal tremor severity scoring from optical flow")]
struct Cli {
    /// Worker threads (fallback: TREMORANK_THREADS, then all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (clips + manifest.jsonl).
    Synth(SynthArgs),
    /// Horn–Schunck flow of one clip as PPM images and/or a network tensor.
    Flow(FlowArgs),
    /// Pretrain the encoder on frequency bins and save an encoder checkpoint.
    Pretrain(PretrainArgs),
    /// Train the ordinal network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Per-clip ranks, scores and per-group overall scores.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Uniform,
    Imbalanced,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelsArg {
    Rank,
    Frequency,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransferArg {
    None,
    Freeze,
    Finetune,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subjects: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    clips_per_subject: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    labels: Option<LabelsArg>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FlowOverrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Spatial and temporal tensor extent.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct FlowArgs {
    clip: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flow: FlowOverrides,
    /// Number of consecutive frame pairs to render (default: all).
    #[arg(long)]
    pairs: Option<usize>,
    /// Skip the PPM visualizations.
    #[arg(long)]
    no_ppm: bool,
    /// Also write the standardized network tensor as tensor.trnk.
    #[arg(long)]
    tensor: bool,
}

#[derive(Args)]
struct OptimOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flow-tensor cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Manifest of a frequency-labelled corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[command(flatten)]
    optim: OptimOverrides,
    #[command(flatten)]
    flow: FlowOverrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Whole corpus, split by subject before training.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, value_enum)]
    transfer: Option<TransferArg>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[command(flatten)]
    optim: OptimOverrides,
    #[command(flatten)]
    flow: FlowOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    Subject,
    All,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "clip")]
    manifest: Option<PathBuf>,
    /// Raw clip files, treated as one session unless grouped otherwise.
    #[arg(long, num_args = 1..)]
    clip: Vec<PathBuf>,
    #[arg(long, value_enum)]
    group_by: Option<GroupBy>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelConfig {
    /// Output channels of the stride-2 blocks; the final block always has 32.
    encoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SplitConfig {
    train_fraction: f64,
    seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 2.0 / 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainConfig {
    bins: usize,
    heldout_fraction: f64,
    /// Overrides `train.epochs` when set.
    epochs: Option<usize>,
    /// Overrides `train.learning_rate` when set.
    learning_rate: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            bins: 4,
            heldout_fraction: 1.0 / 3.0,
            epochs: None,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsConfig {
    out: Option<PathBuf>,
    cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    corpus: CorpusOptions,
    flow: TensorSpec,
    model: ModelConfig,
    train: TrainConfig,
    pretrain: PretrainConfig,
    split: SplitConfig,
    paths: PathsConfig,
}

impl RunConfig {
    fn architecture(&self) -> Architecture {
        Architecture::strided(self.flow.size, &self.model.encoder_channels)
    }

    fn apply_flow(&mut self, f: &FlowOverrides) {
        set(&mut self.flow.alpha, f.alpha);
        set(&mut self.flow.iterations, f.iterations);
        set(&mut self.flow.size, f.size);
    }

    fn apply_optim(&mut self, o: &OptimOverrides) {
        set(&mut self.train.epochs, o.epochs);
        set(&mut self.train.learning_rate, o.lr);
        set(&mut self.train.batch_size, o.batch_size);
        set(&mut self.train.seed, o.seed);
        if o.cache.is_some() {
            self.paths.cache = o.cache.clone();
        }
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug)]
enum Failure {
    /// Bad arguments, unreadable input or refusal (exit 2).
    Usage(String),
    /// Subject overlap between splits (exit 3).
    Protocol(String),
    /// Anything else (exit 1).
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Protocol(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Protocol(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Format { .. } => Failure::Usage(msg),
            Error::SubjectOverlap { .. } => Failure::Protocol(msg),
            _ => Failure::Internal(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| io_failure(p, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn output_dir(flag: Option<&PathBuf>, config: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let dir = flag
        .or(config.paths.out.as_ref())
        .ok_or_else(|| Failure::Usage(format!("{command}: an output directory is required (-o or paths.out)")))?;
    let dir = absolute(dir)?;
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

#[derive(Serialize)]
struct ResolvedRecord<'a> {
    command: &'a str,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

fn write_resolved(dir: &Path, command: &str, inputs: BTreeMap<&str, String>, config: &RunConfig) -> CliResult<()> {
    write_file(
        &dir.join(RESOLVED_CONFIG),
        to_json(&ResolvedRecord {
            command,
            inputs,
            config,
        }),
    )
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: Option<String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_failure(dir, err)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != ARTIFACTS) {
            out.push(p);
        }
    }
    Ok(())
}

/// Lists every file under `dir` with its size and hash.
fn write_artifacts(dir: &Path) -> CliResult<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let artifacts = files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| io_failure(p, e))?;
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
            let volatile = VOLATILE.iter().any(|v| rel.ends_with(v));
            Ok(Artifact {
                sha256: (!volatile).then(|| sha256_hex(&bytes)),
                bytes: bytes.len() as u64,
                path: rel,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_file(&dir.join(ARTIFACTS), to_json(&artifacts))
}

fn timing_csv(seconds: &[f64]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for (i, t) in seconds.iter().enumerate() {
        s.push_str(&format!("{},{t:.3}\n", i + 1));
    }
    s
}

fn load_manifest(path: &Path) -> CliResult<CorpusManifest> {
    Ok(CorpusManifest::load(path)?)
}

fn cmd_synth(args: &SynthArgs, mut config: RunConfig) -> CliResult<()> {
    let c = &mut config.corpus;
    set(&mut c.subjects, args.subjects.map(|v| v as usize));
    set(&mut c.clips_per_subject, args.clips_per_subject.map(|v| v as usize));
    set(&mut c.master_seed, args.seed);
    set(&mut c.noise_sigma, args.noise);
    set(&mut c.n_frames, args.frames);
    if let Some(p) = args.profile {
        c.profile = match p {
            ProfileArg::Uniform => HistogramProfile::Uniform,
            ProfileArg::Imbalanced => HistogramProfile::Imbalanced,
        };
    }
    if let Some(l) = args.labels {
        c.labels = match l {
            LabelsArg::Rank => LabelKind::Rank,
            LabelsArg::Frequency => LabelKind::Frequency,
        };
    }
    if c.subjects == 0 || c.clips_per_subject == 0 {
        return Err(Failure::Usage("subjects and clips per subject must be at least 1".into()));
    }
    let dir = output_dir(args.out.as_ref(), &config, "synth")?;
    let non_empty = std::fs::read_dir(&dir)
        .map_err(|e| io_failure(&dir, e))?
        .next()
        .is_some();
    if non_empty && !args.force {
        return Err(Failure::Usage(format!(
            "{} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    let manifest = generate_corpus(&config.corpus, &dir)?;
    println!("subjects   {}", manifest.subjects().len());
    println!("clips      {}", manifest.len());
    println!("histogram  {:?}", manifest.header.histogram);
    println!("manifest   {} ({})", dir.join("manifest.jsonl").display(), manifest.hash());
    write_resolved(&dir, "synth", BTreeMap::new(), &config)?;
    write_artifacts(&dir)
}

fn cmd_flow(args: &FlowArgs, mut config: RunConfig) -> CliResult<()> {
    config.apply_flow(&args.flow);
    let clip_path = absolute(&args.clip)?;
    let clip = read_clip(&clip_path)?;
    let dir = output_dir(args.out.as_ref(), &config, "flow")?;
    let params = config.flow.flow_params();
    params.validate()?;
    let pairs = args.pairs.unwrap_or(clip.frames.len() - 1).min(clip.frames.len() - 1);
    let mut norms = Vec::new();
    if !args.no_ppm {
        for t in 0..pairs {
            let flow = horn_schunck(&clip.frames[t], &clip.frames[t + 1], params.alpha, params.iterations)?;
            let (rgb, norm) = flow_to_rgb(&flow)?;
            write_file(&dir.join(format!("flow_{t:03}.ppm")), rgb.to_ppm())?;
            norms.push(norm);
        }
        write_file(&dir.join("normalization.json"), to_json(&norms))?;
    }
    if args.tensor {
        let tensor = clip_to_tensor(&clip.frames, params, config.flow.size)?;
        let s = config.flow.size as u32;
        let mut ck = Checkpoint::default();
        ck.set_meta("kind", "flow-tensor");
        ck.tensors.push(tremorank::checkpoint::NamedTensor::new(
            "flow",
            vec![2, s, s, s],
            tensor.data().to_vec(),
        ));
        ck.save(dir.join("tensor.trnk"))?;
    }
    println!("{} flow fields from {}", pairs, clip_path.display());
    let inputs = BTreeMap::from([("clip", clip_path.display().to_string())]);
    write_resolved(&dir, "flow", inputs, &config)?;
    write_artifacts(&dir)
}

fn cmd_pretrain(args: &PretrainArgs, mut config: RunConfig) -> CliResult<()> {
    config.apply_flow(&args.flow);
    config.apply_optim(&args.optim);
    set(&mut config.pretrain.bins, args.bins);
    set(&mut config.train.epochs, config.pretrain.epochs.filter(|_| args.optim.epochs.is_none()));
    set(
        &mut config.train.learning_rate,
        config.pretrain.learning_rate.filter(|_| args.optim.lr.is_none()),
    );
    let corpus_path = absolute(&args.corpus)?;
    let dir = output_dir(args.out.as_ref(), &config, "pretrain")?;
    let cache = config.paths.cache.as_deref().map(absolute).transpose()?;
    let manifest = load_manifest(&corpus_path)?;
    let (train_m, held_m) =
        split_by_subject(&manifest, 1.0 - config.pretrain.heldout_fraction, config.split.seed)?;
    let target = Target::FrequencyBin(config.pretrain.bins);
    let train = LabeledSet::from_manifest(&train_m, &config.flow, cache.as_deref(), target)?;
    let held = LabeledSet::from_manifest(&held_m, &config.flow, cache.as_deref(), target)?;
    let scale = manifest.scale()?;
    let outcome = pretrain_frequency(
        &train,
        &held,
        config.pretrain.bins,
        config.architecture(),
        scale,
        &config.train,
        |r| eprintln!("epoch {:>4}  loss {:.4}  train acc {:.3}  held-out acc {:.3}", r.epoch, r.train_loss, r.train_accuracy, r.heldout_accuracy),
    )?;
    let mut ck = outcome.encoder_checkpoint(config.train.seed);
    tag_flow(&mut ck, &config.flow);
    ck.save(dir.join("encoder.trnk"))?;
    write_file(&dir.join("pretrain_log.csv"), pretrain_log_csv(&outcome.log))?;
    write_file(&dir.join("pretrain_log.json"), to_json(&outcome.log))?;
    write_file(&dir.join("timing.csv"), timing_csv(&outcome.seconds))?;
    println!("held-out bin accuracy {:.4}", outcome.heldout_accuracy);
    let inputs = BTreeMap::from([("corpus", corpus_path.display().to_string())]);
    write_resolved(&dir, "pretrain", inputs, &config)?;
    write_artifacts(&dir)
}

fn tag_flow(ck: &mut Checkpoint, spec: &TensorSpec) {
    ck.set_meta("flow.alpha", spec.alpha);
    ck.set_meta("flow.iterations", spec.iterations);
    ck.set_meta("flow.size", spec.size);
}

/// Flow settings a checkpoint was trained with, falling back to `fallback`.
fn flow_of(ck: &Checkpoint, fallback: TensorSpec) -> CliResult<TensorSpec> {
    let get = |k: &str| ck.meta(k).map(str::to_string);
    let parse_err = |k: &str| Failure::Internal(format!("checkpoint metadata `{k}` is malformed"));
    Ok(TensorSpec {
        alpha: match get("flow.alpha") {
            Some(v) => v.parse().map_err(|_| parse_err("flow.alpha"))?,
            None => fallback.alpha,
        },
        iterations: match get("flow.iterations") {
            Some(v) => v.parse().map_err(|_| parse_err("flow.iterations"))?,
            None => fallback.iterations,
        },
        size: match get("flow.size") {
            Some(v) => v.parse().map_err(|_| parse_err("flow.size"))?,
            None => fallback.size,
        },
    })
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_step: u64,
    final_step: u64,
    best_test_mse: f64,
    train_clips: usize,
    test_clips: usize,
    train_subjects: Vec<u32>,
    test_subjects: Vec<u32>,
}

fn cmd_train(args: &TrainArgs, mut config: RunConfig) -> CliResult<()> {
    config.apply_flow(&args.flow);
    config.apply_optim(&args.optim);
    set(&mut config.split.seed, args.split_seed);
    if let Some(t) = args.transfer {
        config.train.transfer = match t {
            TransferArg::None => TransferMode::None,
            TransferArg::Freeze => TransferMode::Freeze,
            TransferArg::Finetune => TransferMode::Finetune,
        };
    }
    if args.pretrained.is_some() && config.train.transfer == TransferMode::None {
        config.train.transfer = TransferMode::Finetune;
    }
    let dir = output_dir(args.out.as_ref(), &config, "train")?;
    let cache = config.paths.cache.as_deref().map(absolute).transpose()?;
    let mut inputs = BTreeMap::new();
    let (train_m, test_m) = match (&args.corpus, &args.train, &args.test) {
        (Some(c), _, _) => {
            let c = absolute(c)?;
            inputs.insert("corpus", c.display().to_string());
            let m = load_manifest(&c)?;
            let (tr, te) = split_by_subject(&m, config.split.train_fraction, config.split.seed)?;
            let (tr, te) = (tr.relocated(&dir)?, te.relocated(&dir)?);
            tr.save(dir.join("train.jsonl"))?;
            te.save(dir.join("test.jsonl"))?;
            (tr, te)
        }
        (None, Some(tr), Some(te)) => {
            let (tr, te) = (absolute(tr)?, absolute(te)?);
            inputs.insert("train", tr.display().to_string());
            inputs.insert("test", te.display().to_string());
            (load_manifest(&tr)?, load_manifest(&te)?)
        }
        _ => return Err(Failure::Usage("train needs --corpus or both --train and --test".into())),
    };
    check_disjoint(&train_m, &test_m)?;
    let scale = train_m.scale()?;
    if test_m.scale()? != scale {
        return Err(Failure::Usage("train and test manifests use different rank scales".into()));
    }
    let pretrained = match &args.pretrained {
        Some(p) => {
            let p = absolute(p)?;
            inputs.insert("pretrained", p.display().to_string());
            Some(Checkpoint::load(&p)?)
        }
        None => None,
    };
    let train = LabeledSet::from_manifest(&train_m, &config.flow, cache.as_deref(), Target::Rank)?;
    let test = LabeledSet::from_manifest(&test_m, &config.flow, cache.as_deref(), Target::Rank)?;
    let outcome = train_ordinal(
        &train,
        &test,
        config.architecture(),
        scale,
        &config.train,
        pretrained.as_ref(),
        |r| {
            eprintln!(
                "epoch {:>4}  loss {:.4}  train mse {:.4}  test mse {:.4}  test mae {:.4}",
                r.epoch, r.train_loss, r.train_mse, r.test_mse, r.test_mae
            )
        },
    )?;
    let seed = config.train.seed;
    for (name, mut ck) in [
        ("best.trnk", outcome.best_checkpoint(seed)),
        ("final.trnk", outcome.final_checkpoint(seed)),
    ] {
        tag_flow(&mut ck, &config.flow);
        ck.save(dir.join(name))?;
    }
    write_file(&dir.join("train_log.csv"), outcome.log.to_csv())?;
    write_file(&dir.join("train_log.json"), outcome.log.to_json())?;
    write_file(&dir.join("timing.csv"), timing_csv(&outcome.seconds))?;
    write_file(&dir.join("task_weights.json"), to_json(&outcome.weights))?;
    if let Some(report) = &outcome.transfer {
        write_file(&dir.join("transfer_report.json"), to_json(report))?;
    }
    let best_test_mse = outcome
        .log
        .records
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |r| r.test_mse);
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_step: outcome.best_step,
        final_step: outcome.final_step,
        best_test_mse,
        train_clips: train.len(),
        test_clips: test.len(),
        train_subjects: train_m.subjects().into_iter().collect(),
        test_subjects: test_m.subjects().into_iter().collect(),
    };
    write_file(&dir.join("summary.json"), to_json(&summary))?;
    println!("best epoch {} (test mse {:.4})", outcome.best_epoch, best_test_mse);
    write_resolved(&dir, "train", inputs, &config)?;
    write_artifacts(&dir)
}

fn load_model(path: &Path) -> CliResult<(Checkpoint, BackboneParams<f32>)> {
    let ck = Checkpoint::load(path)?;
    let (params, _) = from_checkpoint(&ck)?;
    Ok((ck, params))
}

fn cmd_eval(args: &EvalArgs, mut config: RunConfig) -> CliResult<()> {
    if args.cache.is_some() {
        config.paths.cache = args.cache.clone();
    }
    let ck_path = absolute(&args.checkpoint)?;
    let manifest_path = absolute(&args.manifest)?;
    let (ck, params) = load_model(&ck_path)?;
    config.flow = flow_of(&ck, config.flow)?;
    let manifest = load_manifest(&manifest_path)?;
    let cache = config.paths.cache.as_deref().map(absolute).transpose()?;
    let (report, preds) = evaluate(&params, &manifest, &config.flow, cache.as_deref())?;
    print!("{}", report.to_text());
    if let Some(out) = args.out.as_ref().or(config.paths.out.as_ref()) {
        let dir = absolute(out)?;
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        write_file(&dir.join("report.json"), report.to_json())?;
        write_file(&dir.join("report.txt"), report.to_text())?;
        write_file(&dir.join("correlation.csv"), report.correlation_csv())?;
        write_file(&dir.join("predictions.jsonl"), jsonl(&preds))?;
        let inputs = BTreeMap::from([
            ("checkpoint", ck_path.display().to_string()),
            ("manifest", manifest_path.display().to_string()),
        ]);
        write_resolved(&dir, "eval", inputs, &config)?;
        write_artifacts(&dir)?;
    }
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|p| serde_json::to_string(p).expect("serializable") + "\n")
        .collect()
}

#[derive(Serialize)]
struct GroupScore {
    group: String,
    segments: usize,
    overall_score: f64,
}

fn cmd_predict(args: &PredictArgs, config: RunConfig) -> CliResult<()> {
    let ck_path = absolute(&args.checkpoint)?;
    let (ck, params) = load_model(&ck_path)?;
    let flow = flow_of(&ck, config.flow)?;
    let cache = config.paths.cache.as_deref().map(absolute).transpose()?;
    let (clips, groups): (Vec<ClipPrediction>, Vec<String>) = match &args.manifest {
        Some(m) => {
            let manifest = load_manifest(&absolute(m)?)?;
            let (_, preds) = evaluate(&params, &manifest, &flow, cache.as_deref())?;
            let groups = preds
                .iter()
                .map(|p| match args.group_by.unwrap_or(GroupBy::Subject) {
                    GroupBy::Subject => format!("subject {}", p.subject),
                    GroupBy::All => "all".to_string(),
                })
                .collect();
            (preds, groups)
        }
        None if !args.clip.is_empty() => {
            let mut inputs = Vec::new();
            for c in &args.clip {
                let clip = read_clip(absolute(c)?)?;
                inputs.push(clip_to_tensor(&clip.frames, flow.flow_params(), flow.size)?.data().to_vec());
            }
            let preds = predict(&params, &inputs)?;
            let clips = args
                .clip
                .iter()
                .zip(preds)
                .map(|(c, p)| ClipPrediction {
                    path: c.display().to_string(),
                    subject: 0,
                    true_rank: usize::MAX,
                    prediction: p,
                })
                .collect::<Vec<_>>();
            let groups = args
                .clip
                .iter()
                .map(|c| match args.group_by.unwrap_or(GroupBy::All) {
                    GroupBy::All => "all".to_string(),
                    GroupBy::Subject => c.display().to_string(),
                })
                .collect();
            (clips, groups)
        }
        None => return Err(Failure::Usage("predict needs --manifest or --clip".into())),
    };
    println!("{:<40} {:>4} {:>6} {:>10}", "clip", "rank", "score", "tremor_p");
    for c in &clips {
        println!(
            "{:<40} {:>4} {:>6.1} {:>10.4}",
            c.path, c.prediction.rank, c.prediction.score, c.prediction.tremor_probability
        );
    }
    let mut grouped: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (c, g) in clips.iter().zip(&groups) {
        grouped.entry(g).or_default().push(c.prediction.rank);
    }
    let scale: RankScale = params.scale;
    let mut scores = Vec::new();
    for (g, ranks) in &grouped {
        let s = overall_score(ranks, scale)?;
        println!("{g}: overall score {s:.1} over {} segments", ranks.len());
        scores.push(GroupScore {
            group: g.to_string(),
            segments: ranks.len(),
            overall_score: s,
        });
    }
    if let Some(out) = &args.out {
        let dir = absolute(out)?;
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        write_file(&dir.join("predictions.jsonl"), jsonl(&clips))?;
        write_file(&dir.join("groups.json"), to_json(&scores))?;
        let inputs = BTreeMap::from([("checkpoint", ck_path.display().to_string())]);
        let mut resolved = config.clone();
        resolved.flow = flow;
        write_resolved(&dir, "predict", inputs, &resolved)?;
        write_artifacts(&dir)?;
    }
    Ok(())
}

fn init_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| Failure::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, config),
        Command::Flow(a) => cmd_flow(a, config),
        Command::Pretrain(a) => cmd_pretrain(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::Predict(a) => cmd_predict(a, config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

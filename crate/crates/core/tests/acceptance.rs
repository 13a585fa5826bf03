//! Acceptance suite: one `criterion N: PASS|FAIL` line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tremorank::checkpoint::Checkpoint;
use tremorank::dataset::{CorpusManifest, LabelKind, TensorSpec};
use tremorank::eval::{evaluate, overall_score, predict, EvalReport};
use tremorank::flow::{clip_to_tensor, FlowParams, FrameGray, HornSchunck};
use tremorank::net::{Architecture, BackboneParams, Mode};
use tremorank::ordinal::{
    coral_loss, decode_rank, encode_label, head_logits, task_probabilities, CoralHead, RankScale, TaskWeights,
};
use tremorank::synth::{corpus_specs, generate_corpus, render_clip, split_by_subject, CorpusOptions, HistogramProfile};
use tremorank::train::{pretrain_frequency, train_ordinal, LabeledSet, Target, TrainConfig, TransferMode};

mod common;

type Outcome = (bool, String);

// reduced 32³ profile
const SPEC: TensorSpec = TensorSpec { alpha: 1.0, iterations: 100, size: 32 };
const LR: f64 = 3e-3;

fn arch() -> Architecture {
    Architecture::strided(32, &[8, 16, 32, 64])
}

fn criterion1() -> Outcome {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    for m in [2, 5, 9] {
        let scale = RankScale::new(m).unwrap();
        for r in 0..m {
            let probs: Vec<f64> = encode_label(r, scale).unwrap().extended().iter().map(|&b| b as f64).collect();
            if decode_rank(&probs, 0.5).unwrap() != r {
                failures.push(format!("round trip m={m} r={r}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scale = RankScale::default();
    let mut violations = 0;
    let pairs = 10_000;
    for _ in 0..pairs {
        let projection: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let decrements: Vec<f64> = (0..scale.tasks() - 1).map(|_| rng.random_range(0.0..1.5)).collect();
        let head = CoralHead::from_decrements(projection, rng.random_range(-3.0..3.0), &decrements).unwrap();
        let feature: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = task_probabilities(&head_logits(&feature, &head).unwrap());
        if p.windows(2).any(|w| w[1] > w[0]) {
            violations += 1;
        }
    }
    if violations > 0 {
        failures.push(format!("{violations} non-monotone pairs"));
    }

    // a confident prediction of rank r: logit +4 below r, −4 from r on
    let uniform = TaskWeights::uniform(scale);
    let loss = |pred: usize, truth: usize| {
        let logits: Vec<f64> = (0..scale.tasks()).map(|k| if k < pred { 4.0 } else { -4.0 }).collect();
        coral_loss(&logits, &encode_label(truth, scale).unwrap(), &uniform).unwrap()
    };
    let mut triples = 0;
    for c in 0..9 {
        for i in 0..9usize {
            for j in 0..9usize {
                if i.abs_diff(c) < j.abs_diff(c) {
                    triples += 1;
                    if !(loss(i, c) < loss(j, c)) {
                        failures.push(format!("L({i},{c}) !< L({j},{c})"));
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    detail(failures, format!("{pairs} heads monotone, {triples} loss triples ordered, {secs:.2}s"))
}

fn criterion2() -> Outcome {
    let t0 = Instant::now();
    let stats = common::grad::network_check(7);
    let secs = t0.elapsed().as_secs_f64();
    let mut failures: Vec<String> = stats
        .iter()
        .filter(|s| s.checked == 0 || !(s.worst < 1e-6))
        .map(|s| format!("{} worst {:.2e}", s.kind, s.worst))
        .collect();
    if secs >= 60.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    let summary: Vec<String> = stats.iter().map(|s| format!("{} {:.1e} ({})", s.kind, s.worst, s.checked)).collect();
    detail(failures, format!("worst error (entries): {}; {secs:.2}s", summary.join(", ")))
}

fn pattern(w: usize, h: usize, shift: f64) -> FrameGray {
    use std::f64::consts::TAU;
    FrameGray::from_fn(w, h, |x, y| {
        let x = x as f64 - shift;
        0.5 + 0.2 * (TAU * x / 23.0).sin() * (TAU * y as f64 / 29.0).cos() + 0.1 * (TAU * (x + y as f64) / 17.0).sin()
    })
    .unwrap()
}

fn criterion3() -> Outcome {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let (w, h) = (64, 64);
    let (a, b) = (pattern(w, h, 0.0), pattern(w, h, 1.0));
    let mut hs = HornSchunck::new(&a, &b, 1.0).unwrap();
    let mut energy = hs.energy();
    let mut rises = 0;
    for _ in 0..300 {
        hs.step();
        let e = hs.energy();
        if e > energy * (1.0 + 1e-12) {
            rises += 1;
        }
        energy = e;
    }
    if rises > 0 {
        failures.push(format!("energy rose {rises} times"));
    }
    let f = hs.flow();
    let margin = 12;
    let (mut err, mut n) = (0.0, 0.0);
    for y in margin..f.height - margin {
        for x in margin..f.width - margin {
            let i = y * f.width + x;
            err += ((f.u[i] - 1.0).powi(2) + f.v[i].powi(2)).sqrt();
            n += 1.0;
        }
    }
    let mean_err = err / n;
    if !(mean_err < 0.2) {
        failures.push(format!("interior endpoint error {mean_err:.3} px"));
    }
    let mut still = HornSchunck::new(&a, &a, 1.0).unwrap();
    (0..100).for_each(|_| still.step());
    let z = still.flow();
    if !z.u.iter().chain(&z.v).all(|x| *x == 0.0) {
        failures.push("zero motion gave non-zero flow".into());
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 30.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    detail(failures, format!("1 px shift mean endpoint error {mean_err:.4} px, energy monotone, {secs:.2}s"))
}

fn criterion4() -> Outcome {
    let mut p = BackboneParams::<f32>::init(Architecture::standard(), RankScale::default(), 0).unwrap();
    let x = vec![vec![0.01f32; 2 * 64 * 64 * 64]];
    let (logits, cache) = p.forward(&x, Mode::Infer).unwrap();
    let expect = [[2, 64, 64, 64], [64, 32, 32, 32], [128, 16, 16, 16], [256, 8, 8, 8], [512, 4, 4, 4], [32, 1, 1, 1]];
    let mut failures = Vec::new();
    if p.arch.layer_shapes().unwrap() != expect.to_vec() {
        failures.push(format!("layer shapes {:?}", p.arch.layer_shapes().unwrap()));
    }
    for (i, s) in expect.iter().enumerate() {
        let got = cache.activation(i).map(|a| a[0].len());
        if got != Some(s.iter().product()) {
            failures.push(format!("layer {i} holds {got:?} values"));
        }
    }
    if logits[0].len() != 8 {
        failures.push(format!("{} logits", logits[0].len()));
    }
    detail(failures, format!("{} layer shapes match, {} logits", expect.len(), logits[0].len()))
}

struct RankData {
    manifest: CorpusManifest,
    train: LabeledSet,
    test: LabeledSet,
}

fn rank_data(dir: &Path) -> RankData {
    let opts = CorpusOptions { master_seed: 7, ..Default::default() };
    let manifest = generate_corpus(&opts, dir.join("rank")).unwrap();
    let (tr, te) = split_by_subject(&manifest, 2.0 / 3.0, 1).unwrap();
    let cache = dir.join("cache");
    RankData {
        train: LabeledSet::from_manifest(&tr, &SPEC, Some(&cache), Target::Rank).unwrap(),
        test: LabeledSet::from_manifest(&te, &SPEC, Some(&cache), Target::Rank).unwrap(),
        manifest,
    }
}

fn report_line(r: &EvalReport) -> String {
    format!(
        "MAE {:.3}, accuracy {:.3}, adjacent {}, Spearman {}",
        r.mae_rank,
        r.accuracy,
        r.adjacent_error_fraction.map_or("n/a".into(), |v| format!("{v:.3}")),
        r.spearman.map_or("n/a".into(), |v| format!("{v:.3}")),
    )
}

fn criterion5(data: &RankData, setup_secs: f64) -> (Outcome, BackboneParams<f32>) {
    let t0 = Instant::now();
    let subjects = |s: &LabeledSet| {
        let mut v = s.subjects.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let cfg = TrainConfig { learning_rate: LR, epochs: 100, log_every: 10, ..Default::default() };
    let out = train_ordinal(&data.train, &data.test, arch(), RankScale::default(), &cfg, None, |_| {}).unwrap();
    let report = |p: &BackboneParams<f32>| {
        EvalReport::from_predictions(&data.test.targets, &predict(p, &data.test.inputs).unwrap(), RankScale::default())
            .unwrap()
    };
    let fin = report(&out.final_params);
    let best = report(&out.best_params);
    let secs = setup_secs + t0.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if (subjects(&data.train), subjects(&data.test)) != (24, 12) {
        failures.push(format!("split {}/{}", subjects(&data.train), subjects(&data.test)));
    }
    if !(fin.mae_rank <= 0.6) {
        failures.push("MAE".into());
    }
    if !(fin.accuracy >= 0.5) {
        failures.push("accuracy".into());
    }
    if !fin.adjacent_error_fraction.is_none_or(|v| v >= 0.8) {
        failures.push("adjacent errors".into());
    }
    if !fin.spearman.is_some_and(|v| v > 0.9) {
        failures.push("Spearman".into());
    }
    if secs >= 20.0 * 60.0 {
        failures.push(format!("runtime {secs:.0}s"));
    }
    let msg = format!(
        "{} clips, final epoch {}; best epoch {}: {}; {secs:.0}s",
        data.manifest.len(),
        report_line(&fin),
        out.best_epoch,
        report_line(&best),
    );
    (detail(failures, msg), out.final_params)
}

fn criterion6(dir: &Path, data: &RankData) -> Outcome {
    let opts = CorpusOptions {
        subjects: 12,
        master_seed: 11,
        labels: LabelKind::Frequency,
        profile: HistogramProfile::Uniform,
        ..Default::default()
    };
    let fm = generate_corpus(&opts, dir.join("frequency")).unwrap();
    let (ftr, fho) = split_by_subject(&fm, 2.0 / 3.0, 0).unwrap();
    let cache = dir.join("cache");
    let ftrain = LabeledSet::from_manifest(&ftr, &SPEC, Some(&cache), Target::FrequencyBin(4)).unwrap();
    let fheld = LabeledSet::from_manifest(&fho, &SPEC, Some(&cache), Target::FrequencyBin(4)).unwrap();
    let pcfg = TrainConfig { learning_rate: 1e-3, epochs: 20, ..Default::default() };
    let pre = pretrain_frequency(&ftrain, &fheld, 4, arch(), RankScale::default(), &pcfg, |_| {}).unwrap();
    let ck = Checkpoint::from_bytes(&pre.encoder_checkpoint(0).to_bytes().unwrap()).unwrap();

    let run = |transfer: TransferMode| {
        let cfg = TrainConfig { learning_rate: LR, epochs: 10, transfer, ..Default::default() };
        let ck = (transfer != TransferMode::None).then_some(&ck);
        train_ordinal(&data.train, &data.test, arch(), RankScale::default(), &cfg, ck, |_| {}).unwrap()
    };
    let mae = |p: &BackboneParams<f32>| {
        EvalReport::from_predictions(&data.test.targets, &predict(p, &data.test.inputs).unwrap(), RankScale::default())
            .unwrap()
            .mae_rank
    };
    let scratch = mae(&run(TransferMode::None).final_params);
    let tuned = mae(&run(TransferMode::Finetune).final_params);
    let frozen = run(TransferMode::Freeze);
    let mut failures = Vec::new();
    if !(tuned <= scratch) {
        failures.push("finetune MAE above scratch".into());
    }
    let n = frozen.transfer.as_ref().map_or(0, |t| t.frozen_blocks);
    if n == 0 || (0..n).any(|b| frozen.final_params.blocks[b] != pre.params.blocks[b]) {
        failures.push(format!("{n} frozen blocks, not all bit-identical"));
    }
    detail(
        failures,
        format!(
            "pretrain held-out accuracy {:.3}; 10-epoch MAE finetune {tuned:.3} vs scratch {scratch:.3}; \
             frozen MAE {:.3}, {n} blocks bit-identical",
            pre.heldout_accuracy,
            mae(&frozen.final_params),
        ),
    )
}

fn criterion7(trained: &BackboneParams<f32>) -> Outcome {
    let scale = RankScale::default();
    let mut failures = Vec::new();
    let off = overall_score(&[0; 12], scale).unwrap();
    let on = overall_score(&[4; 12], scale).unwrap();
    if off != 0.0 {
        failures.push(format!("all-0 group scored {off}"));
    }
    if on != 2.0 {
        failures.push(format!("all-4 group scored {on}"));
    }
    // a still, noise-free clip through the trained model
    let mut spec = corpus_specs(&CorpusOptions { master_seed: 7, ..Default::default() })
        .unwrap()
        .into_iter()
        .find(|s| s.rank == 0)
        .unwrap();
    spec.noise_sigma = 0.0;
    let frames = render_clip(&spec, SPEC.size + 1).unwrap();
    let params = FlowParams { alpha: SPEC.alpha, iterations: SPEC.iterations };
    let tensor = clip_to_tensor(&frames, params, SPEC.size).unwrap();
    let pred = predict(trained, &[tensor.data().to_vec()]).unwrap();
    // Not part of the aggregation rule. A still clip standardizes to an
    // all-zero tensor, which never occurs in noisy training data.
    let still = overall_score(&[pred[0].rank], scale).unwrap();
    let probe = if still == 0.0 { "ok" } else { "FAILS, expected 0" };
    detail(failures, format!("all-0 → {off}, all-4 → {on}; probe: trained model on a still noise-free clip → {still} ({probe})"))
}

/// Everything a pipeline run writes, in a fixed order.
fn micro_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let spec = TensorSpec { alpha: 1.0, iterations: 30, size: 16 };
    let arch = Architecture::strided(16, &[6, 12]);
    let base = CorpusOptions { canvas: 32, n_frames: 17, subjects: 6, clips_per_subject: 4, ..Default::default() };
    let fm = generate_corpus(
        &CorpusOptions { labels: LabelKind::Frequency, profile: HistogramProfile::Uniform, master_seed: 3, ..base.clone() },
        dir.join("frequency"),
    )
    .unwrap();
    let rm = generate_corpus(&CorpusOptions { master_seed: 4, ..base }, dir.join("rank")).unwrap();
    let cache = dir.join("cache");
    let set = |m: &CorpusManifest, t: Target| LabeledSet::from_manifest(m, &spec, Some(&cache), t).unwrap();

    let (ftr, fho) = split_by_subject(&fm, 2.0 / 3.0, 0).unwrap();
    let pcfg = TrainConfig { learning_rate: 3e-3, epochs: 3, seed: 8, ..Default::default() };
    let pre = pretrain_frequency(
        &set(&ftr, Target::FrequencyBin(4)),
        &set(&fho, Target::FrequencyBin(4)),
        4,
        arch.clone(),
        RankScale::default(),
        &pcfg,
        |_| {},
    )
    .unwrap();
    let ck = pre.encoder_checkpoint(8);

    let (tr, te) = split_by_subject(&rm, 2.0 / 3.0, 2).unwrap();
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 4, batch_size: 4, seed: 8, transfer: TransferMode::Finetune, ..Default::default() };
    let out = train_ordinal(&set(&tr, Target::Rank), &set(&te, Target::Rank), arch, RankScale::default(), &cfg, Some(&ck), |_| {})
        .unwrap();
    let (report, clips) = evaluate(&out.best_params, &te, &spec, Some(&cache)).unwrap();

    let mut files = vec![
        ("frequency manifest".to_string(), std::fs::read(dir.join("frequency/manifest.jsonl")).unwrap()),
        ("rank manifest".to_string(), std::fs::read(dir.join("rank/manifest.jsonl")).unwrap()),
        ("pretrained checkpoint".to_string(), ck.to_bytes().unwrap()),
        ("best checkpoint".to_string(), out.best_checkpoint(8).to_bytes().unwrap()),
        ("final checkpoint".to_string(), out.final_checkpoint(8).to_bytes().unwrap()),
        ("training log".to_string(), out.log.to_csv().into_bytes()),
        ("report".to_string(), report.to_json().into_bytes()),
        ("predictions".to_string(), serde_json::to_vec(&clips).unwrap()),
    ];
    let mut cached: Vec<_> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    cached.sort();
    for p in cached {
        files.push((format!("cache {}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
    }
    files
}

fn criterion8() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (micro_pipeline(a.path()), micro_pipeline(b.path()));
    let mut failures = Vec::new();
    if x.len() != y.len() {
        failures.push(format!("{} vs {} artifacts", x.len(), y.len()));
    }
    for ((name, p), (_, q)) in x.iter().zip(&y) {
        if p != q {
            failures.push(format!("{name} differs"));
        }
    }
    let bytes: usize = x.iter().map(|(_, d)| d.len()).sum();
    detail(failures, format!("{} artifacts ({bytes} bytes) byte-identical across two runs", x.len()))
}

fn detail(failures: Vec<String>, summary: String) -> Outcome {
    if failures.is_empty() {
        (true, summary)
    } else {
        (false, format!("{} [{}]", summary, failures.join("; ")))
    }
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn main() {
    // `cargo test -- <filter>` passes arguments; only `--list` needs an answer
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let mut report = |n: usize, r: Result<Outcome, String>| {
        let (ok, msg) = r.unwrap_or_else(|e| (false, format!("panicked: {e}")));
        all &= ok;
        println!("criterion {n}: {} {msg}", if ok { "PASS" } else { "FAIL" });
    };
    report(1, guarded(criterion1));
    report(2, guarded(criterion2));
    report(3, guarded(criterion3));
    report(4, guarded(criterion4));

    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    match guarded(|| rank_data(dir.path())) {
        Ok(data) => {
            let setup = t0.elapsed().as_secs_f64();
            match guarded(|| criterion5(&data, setup)) {
                Ok((outcome, trained)) => {
                    report(5, Ok(outcome));
                    report(6, guarded(|| criterion6(dir.path(), &data)));
                    report(7, guarded(|| criterion7(&trained)));
                }
                Err(e) => {
                    report(5, Err(e.clone()));
                    report(6, guarded(|| criterion6(dir.path(), &data)));
                    report(7, Err(format!("no trained model: {e}")));
                }
            }
        }
        Err(e) => {
            for n in 5..=7 {
                report(n, Err(format!("corpus setup: {e}")));
            }
        }
    }
    report(8, guarded(criterion8));
    if !all {
        std::process::exit(1);
    }
}

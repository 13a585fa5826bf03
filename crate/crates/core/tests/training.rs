use std::path::Path;

use tremorank::checkpoint::{from_checkpoint, Checkpoint};
use tremorank::dataset::{read_clip, CorpusManifest, LabelKind, TensorSpec};
use tremorank::net::{Architecture, BackboneParams, Mode};
use tremorank::ordinal::{coral_loss_with_grad, encode_label, task_weights_from_counts, RankScale};
use tremorank::synth::{frequency_bin, generate_corpus, split_by_subject, CorpusOptions, HistogramProfile};
use tremorank::train::{
    pretrain_frequency, train_ordinal, Adam, LabeledSet, Target, TrainConfig, TransferMode,
};
use tremorank::Error;

mod common;

const SPEC: TensorSpec = TensorSpec { alpha: 1.0, iterations: 30, size: 16 };

fn arch() -> Architecture {
    Architecture::strided(16, &[6, 12])
}

fn tiny_options(subjects: usize, clips: usize, labels: LabelKind, seed: u64) -> CorpusOptions {
    CorpusOptions {
        subjects,
        clips_per_subject: clips,
        profile: HistogramProfile::Uniform,
        master_seed: seed,
        labels,
        n_frames: 17,
        canvas: 32,
        noise_sigma: 0.0,
        ..Default::default()
    }
}

fn tiny_corpus(dir: &Path, subjects: usize, clips: usize, labels: LabelKind, seed: u64) -> CorpusManifest {
    generate_corpus(&tiny_options(subjects, clips, labels, seed), dir).unwrap()
}

fn rank_sets(dir: &Path) -> (LabeledSet, LabeledSet) {
    // subjects 0 and 1 train (8 clips), subject 2 tests
    let m = tiny_corpus(dir, 3, 4, LabelKind::Rank, 21);
    let train = m.filtered(|c| c.subject < 2);
    let test = m.filtered(|c| c.subject == 2);
    (
        LabeledSet::from_manifest(&train, &SPEC, None, Target::Rank).unwrap(),
        LabeledSet::from_manifest(&test, &SPEC, None, Target::Rank).unwrap(),
    )
}

#[test]
fn eight_noise_free_clips_are_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = rank_sets(dir.path());
    assert_eq!(train.len(), 8);
    // one clip per step: 1600 Adam steps
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 200, batch_size: 1, seed: 1, log_every: 10, ..Default::default() };
    let out = train_ordinal(&train, &test, arch(), RankScale::default(), &cfg, None, |_| {}).unwrap();
    let last = out.log.records.last().unwrap();
    assert_eq!(last.epoch, 200);
    assert_eq!(last.train_mse, 0.0, "{:?}", out.log.records.iter().map(|r| r.train_mse).collect::<Vec<_>>());
    assert!(out.log.records.first().unwrap().train_loss > last.train_loss);
}

#[test]
fn zero_learning_rate_changes_nothing_learnable() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = rank_sets(dir.path());
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 4, batch_size: 8, seed: 2, ..Default::default() };
    let out = train_ordinal(&train, &test, arch(), RankScale::default(), &cfg, None, |_| {}).unwrap();
    let mut init = BackboneParams::<f32>::init(arch(), RankScale::default(), 2).unwrap();
    let mut fin = out.final_params.clone();
    assert_eq!(fin.trainable_mut(), init.trainable_mut());
    // one full batch per epoch: the batch statistics, hence the loss, never change
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.train_loss).collect();
    for l in &losses {
        assert!((l - losses[0]).abs() <= 1e-12 * losses[0], "{losses:?}");
    }
}

#[test]
fn first_small_step_decreases_the_batch_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = rank_sets(dir.path());
    let mut p = BackboneParams::<f32>::init(arch(), RankScale::default(), 3).unwrap();
    let mut hist = vec![0u64; 9];
    train.targets.iter().for_each(|&r| hist[r] += 1);
    let w = task_weights_from_counts(&hist).unwrap();
    let labels: Vec<_> = train.targets.iter().map(|&r| encode_label(r, p.scale).unwrap()).collect();
    let loss_and_grad = |p: &BackboneParams<f32>| {
        let mut q = p.clone();
        let (logits, cache) = q.forward(&train.inputs, Mode::Train).unwrap();
        let mut total = 0.0;
        let mut dl = Vec::new();
        for (z, y) in logits.iter().zip(&labels) {
            let (l, g) = coral_loss_with_grad(z, y, &w).unwrap();
            total += l;
            dl.push(g);
        }
        (total, p.backward_with(&cache, &dl, false).unwrap())
    };
    let (before, grads) = loss_and_grad(&p);
    let mut adam = Adam::new(&TrainConfig { learning_rate: 1e-4, ..Default::default() });
    adam.step(p.trainable_mut(), grads.slices(0)).unwrap();
    let (after, _) = loss_and_grad(&p);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn overlapping_subjects_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = rank_sets(dir.path());
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let err = train_ordinal(&train, &train, arch(), RankScale::default(), &cfg, None, |_| {}).unwrap_err();
    match err {
        Error::SubjectOverlap { subjects } => assert_eq!(subjects, vec![0, 1]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = rank_sets(dir.path());
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 3, batch_size: 3, seed: 9, ..Default::default() };
    let run = || train_ordinal(&train, &test, arch(), RankScale::default(), &cfg, None, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.best_checkpoint(9).to_bytes().unwrap(), b.best_checkpoint(9).to_bytes().unwrap());
    assert_eq!(a.final_checkpoint(9).to_bytes().unwrap(), b.final_checkpoint(9).to_bytes().unwrap());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let other = train_ordinal(&train, &test, arch(), RankScale::default(), &TrainConfig { seed: 10, ..cfg }, None, |_| {})
        .unwrap();
    assert_ne!(other.final_checkpoint(10).to_bytes().unwrap(), a.final_checkpoint(9).to_bytes().unwrap());
}

fn frequency_sets(dir: &Path) -> (LabeledSet, LabeledSet) {
    let m = tiny_corpus(dir, 24, 2, LabelKind::Frequency, 5);
    let (tr, ho) = split_by_subject(&m, 2.0 / 3.0, 0).unwrap();
    (
        LabeledSet::from_manifest(&tr, &SPEC, None, Target::FrequencyBin(4)).unwrap(),
        LabeledSet::from_manifest(&ho, &SPEC, None, Target::FrequencyBin(4)).unwrap(),
    )
}

#[test]
fn frequency_pretraining_separates_bins_and_saves_the_encoder() {
    // one clip per subject so every held-out clip is an independent frequency;
    // 32 flow steps resolve the 2 Hz bins far better than 16
    let dir = tempfile::tempdir().unwrap();
    let spec = TensorSpec { alpha: 1.0, iterations: 30, size: 32 };
    let m = generate_corpus(&CorpusOptions { n_frames: 33, ..tiny_options(120, 1, LabelKind::Frequency, 5) }, dir.path()).unwrap();
    let (tr, held_m) = split_by_subject(&m, 2.0 / 3.0, 0).unwrap();
    let train = LabeledSet::from_manifest(&tr, &spec, None, Target::FrequencyBin(4)).unwrap();
    let held = LabeledSet::from_manifest(&held_m, &spec, None, Target::FrequencyBin(4)).unwrap();
    assert_eq!(held.len(), 40);

    // the bins must be recoverable from the clips at all: a periodogram oracle
    let oracle_hits = held_m
        .clips
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let frames = read_clip(held_m.clip_path(*i)).unwrap().frames;
            let track = common::axis_track(&frames, c.spec.axis_angle);
            frequency_bin(common::peak_frequency(&track, 30.0), 4) == held.targets[*i]
        })
        .count();
    assert!(oracle_hits as f64 / held.len() as f64 > 0.9, "oracle {oracle_hits}/{}", held.len());

    let arch = Architecture::strided(32, &[6, 12]);
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 30, batch_size: 8, seed: 4, ..Default::default() };
    let run = || pretrain_frequency(&train, &held, 4, arch.clone(), RankScale::default(), &cfg, |_| {}).unwrap();
    let out = run();
    assert!(out.heldout_accuracy > 0.9, "held-out accuracy {}", out.heldout_accuracy);

    let ck = out.encoder_checkpoint(4);
    let names: Vec<&str> = ck.tensors.iter().map(|t| t.name.as_str()).collect();
    assert!(names.iter().all(|n| n.starts_with("block1.") || n.starts_with("block2.")), "{names:?}");
    assert_eq!(names.len(), 12);
    assert_eq!(ck.to_bytes().unwrap(), run().encoder_checkpoint(4).to_bytes().unwrap());
}

#[test]
fn single_bin_corpus_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut train, held) = frequency_sets(dir.path());
    train.targets.iter_mut().for_each(|t| *t = 2);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let err = pretrain_frequency(&train, &held, 4, arch(), RankScale::default(), &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
}

#[test]
fn frozen_transfer_keeps_blocks_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ftrain, fheld) = frequency_sets(&dir.path().join("freq"));
    let pcfg = TrainConfig { learning_rate: 3e-3, epochs: 3, seed: 4, ..Default::default() };
    let pre = pretrain_frequency(&ftrain, &fheld, 4, arch(), RankScale::default(), &pcfg, |_| {}).unwrap();
    let ck = Checkpoint::from_bytes(&pre.encoder_checkpoint(4).to_bytes().unwrap()).unwrap();

    let (train, test) = rank_sets(&dir.path().join("rank"));
    let cfg = TrainConfig { learning_rate: 3e-3, epochs: 5, transfer: TransferMode::Freeze, seed: 6, ..Default::default() };
    let out = train_ordinal(&train, &test, arch(), RankScale::default(), &cfg, Some(&ck), |_| {}).unwrap();
    let report = out.transfer.as_ref().unwrap();
    assert_eq!(report.frozen_blocks, 2);
    for b in 0..2 {
        assert_eq!(out.final_params.blocks[b], pre.params.blocks[b], "block {}", b + 1);
    }
    assert_ne!(out.final_params.blocks[2], BackboneParams::<f32>::init(arch(), RankScale::default(), 6).unwrap().blocks[2]);

    // the saved checkpoint carries the same frozen blocks
    let (saved, _) = from_checkpoint(&out.final_checkpoint(6)).unwrap();
    assert_eq!(saved.blocks[..2], pre.params.blocks[..2]);

    let ft = TrainConfig { transfer: TransferMode::Finetune, ..cfg };
    let tuned = train_ordinal(&train, &test, arch(), RankScale::default(), &ft, Some(&ck), |_| {}).unwrap();
    assert_ne!(tuned.final_params.blocks[0], pre.params.blocks[0]);
    assert!(train_ordinal(&train, &test, arch(), RankScale::default(), &ft, None, |_| {}).is_err());
}

#![allow(dead_code)]

use tremorank::flow::FrameGray;
use tremorank::synth::BACKGROUND;

/// Intensity-weighted centroid above the background level.
pub fn centroid(frame: &FrameGray) -> (f64, f64) {
    // the background as stored in a u8 container; any residual weight over
    // the whole canvas drags the centroid towards the middle
    let level = (BACKGROUND * 255.0).round() / 255.0;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let w = (frame.at(x, y) - level).max(0.0);
            sw += w;
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
        }
    }
    (sx / sw, sy / sw)
}

/// Least-squares `a cos + b sin + c` fit at frequency `f`; returns the amplitude and residual.
pub fn sinusoid_fit(track: &[f64], f: f64, fps: f64) -> (f64, f64) {
    let w = std::f64::consts::TAU * f / fps;
    // normal equations for [cos, sin, 1]
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for (t, y) in track.iter().enumerate() {
        let row = [(w * t as f64).cos(), (w * t as f64).sin(), 1.0];
        for i in 0..3 {
            atb[i] += row[i] * y;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination, 3×3
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&ata[i]);
        m[i][3] = atb[i];
    }
    for k in 0..3 {
        for i in k + 1..3 {
            let r = m[i][k] / m[k][k];
            for j in k..4 {
                m[i][j] -= r * m[k][j];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for i in (0..3).rev() {
        x[i] = (m[i][3] - (i + 1..3).map(|j| m[i][j] * x[j]).sum::<f64>()) / m[i][i];
    }
    let resid = track
        .iter()
        .enumerate()
        .map(|(t, y)| (y - x[0] * (w * t as f64).cos() - x[1] * (w * t as f64).sin() - x[2]).powi(2))
        .sum::<f64>();
    (x[0].hypot(x[1]), resid)
}

/// Frequency in `[3, 13]` Hz whose sinusoid best explains `track`.
pub fn peak_frequency(track: &[f64], fps: f64) -> f64 {
    (300..=1300)
        .map(|k| k as f64 / 100.0)
        .min_by(|a, b| sinusoid_fit(track, *a, fps).1.total_cmp(&sinusoid_fit(track, *b, fps).1))
        .unwrap()
}

/// Centroid projected on the axis at `angle`, one value per frame.
pub fn axis_track(frames: &[FrameGray], angle: f64) -> Vec<f64> {
    frames
        .iter()
        .map(|f| {
            let (x, y) = centroid(f);
            x * angle.cos() + y * angle.sin()
        })
        .collect()
}

pub mod grad {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tremorank::net::{Architecture, BackboneParams, Mode};
    use tremorank::ordinal::{coral_loss, coral_loss_with_grad, encode_label, task_weights_from_counts, RankScale, TaskWeights};

    const H: f64 = 1e-5;
    const RANKS: [usize; 3] = [1, 4, 7];

    /// Worst relative error seen for one parameter kind.
    #[derive(Debug, Clone)]
    pub struct KindStat {
        pub kind: &'static str,
        pub checked: usize,
        pub worst: f64,
    }

    /// Central differences at `H` carry ~1e-10 absolute rounding error, so
    /// gradients below `1e-4` are compared against that scale instead.
    pub fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
    }

    /// 8³ input → 8×4³ (BN, ReLU) → 32×1³, random non-trivial biases and affine terms.
    pub fn small_net(seed: u64) -> BackboneParams<f64> {
        let mut p = BackboneParams::<f64>::init(Architecture::strided(8, &[8]), RankScale::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in &mut p.blocks {
            b.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            if let Some(bn) = &mut b.bn {
                bn.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
                bn.shift.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        p.head.bias_base = rng.random_range(0.0..1.0);
        p.head.decrement_raw.iter_mut().for_each(|v| *v = rng.random_range(-2.0..1.0));
        p
    }

    pub fn batch(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..2 * 512).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn weights() -> TaskWeights {
        task_weights_from_counts(&[3, 5, 8, 13, 8, 5, 3, 2, 1]).unwrap()
    }

    /// Summed CORAL loss of a train-mode pass (batch statistics).
    pub fn total_loss(p: &BackboneParams<f64>, x: &[Vec<f64>]) -> f64 {
        let mut p = p.clone();
        let (logits, _) = p.forward(x, Mode::Train).unwrap();
        let w = weights();
        logits
            .iter()
            .zip(RANKS)
            .map(|(l, r)| coral_loss(l, &encode_label(r, p.scale).unwrap(), &w).unwrap())
            .sum()
    }

    fn numeric(p: &BackboneParams<f64>, x: &[Vec<f64>], get: impl Fn(&mut BackboneParams<f64>) -> &mut f64) -> f64 {
        let mut plus = p.clone();
        *get(&mut plus) += H;
        let mut minus = p.clone();
        *get(&mut minus) -= H;
        (total_loss(&plus, x) - total_loss(&minus, x)) / (2.0 * H)
    }

    /// Central-difference check of every parameter kind over `nets` random networks.
    pub fn network_check(nets: u64) -> Vec<KindStat> {
        let kinds = [
            "coral loss",
            "conv weight",
            "conv bias",
            "bn scale",
            "bn shift",
            "linear",
            "head bias",
            "input",
            "pre-bn bias",
        ];
        let mut stats: Vec<KindStat> = kinds.iter().map(|k| KindStat { kind: k, checked: 0, worst: 0.0 }).collect();
        fn bump(stats: &mut [KindStat], i: usize, err: f64) {
            stats[i].checked += 1;
            stats[i].worst = stats[i].worst.max(err);
        }
        let w = weights();
        for seed in 0..nets {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            // the loss itself, away from the saturation cap
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
            let label = encode_label(rng.random_range(0..9), RankScale::default()).unwrap();
            let (_, g) = coral_loss_with_grad(&z, &label, &w).unwrap();
            for k in 0..8 {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[k] += H;
                zm[k] -= H;
                let n = (coral_loss(&zp, &label, &w).unwrap() - coral_loss(&zm, &label, &w).unwrap()) / (2.0 * H);
                bump(&mut stats, 0, rel(g[k], n));
            }

            let p = small_net(seed);
            let x = batch(seed + 1000, 3);
            let mut q = p.clone();
            let (logits, cache) = q.forward(&x, Mode::Train).unwrap();
            let gl: Vec<Vec<f64>> = logits
                .iter()
                .zip(RANKS)
                .map(|(l, r)| coral_loss_with_grad(l, &encode_label(r, p.scale).unwrap(), &w).unwrap().1)
                .collect();
            let g = p.backward(&cache, &gl).unwrap();
            for b in 0..p.blocks.len() {
                for _ in 0..25 {
                    let i = rng.random_range(0..p.blocks[b].weight.len());
                    bump(&mut stats, 1, rel(g.blocks[b].weight[i], numeric(&p, &x, |q| &mut q.blocks[b].weight[i])));
                }
                for i in 0..p.blocks[b].bias.len() {
                    let (a, n) = (g.blocks[b].bias[i], numeric(&p, &x, |q| &mut q.blocks[b].bias[i]));
                    if p.blocks[b].bn.is_some() {
                        // batch statistics absorb the bias: both must vanish
                        bump(&mut stats, 8, a.abs().max(n.abs()));
                    } else {
                        bump(&mut stats, 2, rel(a, n));
                    }
                }
                let channels = p.blocks[b].bn.as_ref().map_or(0, |bn| bn.scale.len());
                for i in 0..channels {
                    bump(&mut stats, 3, rel(g.blocks[b].bn_scale[i], numeric(&p, &x, |q| &mut q.blocks[b].bn.as_mut().unwrap().scale[i])));
                    bump(&mut stats, 4, rel(g.blocks[b].bn_shift[i], numeric(&p, &x, |q| &mut q.blocks[b].bn.as_mut().unwrap().shift[i])));
                }
            }
            for i in 0..p.head.projection.len() {
                bump(&mut stats, 5, rel(g.head.projection[i], numeric(&p, &x, |q| &mut q.head.projection[i])));
            }
            bump(&mut stats, 6, rel(g.head.bias_base, numeric(&p, &x, |q| &mut q.head.bias_base)));
            for i in 0..p.head.decrement_raw.len() {
                bump(&mut stats, 6, rel(g.head.decrement_raw[i], numeric(&p, &x, |q| &mut q.head.decrement_raw[i])));
            }
            let gin = g.input.as_ref().unwrap();
            for _ in 0..10 {
                let (s, i) = (rng.random_range(0..3), rng.random_range(0..1024));
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[s][i] += H;
                xm[s][i] -= H;
                bump(&mut stats, 7, rel(gin[s][i], (total_loss(&p, &xp) - total_loss(&p, &xm)) / (2.0 * H)));
            }
        }
        stats
    }
}

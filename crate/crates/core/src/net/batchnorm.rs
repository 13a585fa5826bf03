//! Per-channel batch normalization over `(batch, depth, height, width)`.

use crate::scalar::Real;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Batch statistics of one train-mode pass, kept for backward and the running update.
#[derive(Debug, Clone)]
pub struct BnTrace<T> {
    /// Normalized pre-activations, one buffer per sample.
    pub normalized: Vec<Vec<T>>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl<T> BnTrace<T> {
    pub fn inv_std(&self, eps: f64) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
    }
}

/// Normalizes `x` in place with batch statistics, applies scale/shift and
/// optionally ReLU. Statistics are reduced in `f64`.
pub fn forward_train<T: Real>(bn: &BatchNorm<T>, x: &mut [Vec<T>], spatial: usize, relu: bool) -> BnTrace<T> {
    let channels = bn.channels();
    let count = x.len() * spatial;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for sample in x.iter() {
            s += sample[c * spatial..(c + 1) * spatial]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for sample in x.iter() {
            ss += sample[c * spatial..(c + 1) * spatial]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / count as f64;
    }
    let mut normalized = Vec::with_capacity(x.len());
    for sample in x.iter_mut() {
        let mut xhat = vec![T::zero(); sample.len()];
        for c in 0..channels {
            let inv = T::from_f64_lossy(1.0 / (var[c] + bn.eps).sqrt());
            let m = T::from_f64_lossy(mean[c]);
            let (g, b) = (bn.scale[c], bn.shift[c]);
            let range = c * spatial..(c + 1) * spatial;
            for (v, n) in sample[range.clone()].iter_mut().zip(&mut xhat[range]) {
                *n = (*v - m) * inv;
                let y = g * *n + b;
                *v = if relu && y < T::zero() { T::zero() } else { y };
            }
        }
        normalized.push(xhat);
    }
    BnTrace {
        normalized,
        mean,
        var,
        count,
    }
}

/// Running-statistics affine map (inference), optionally followed by ReLU.
pub fn forward_infer<T: Real>(bn: &BatchNorm<T>, x: &mut [T], spatial: usize, relu: bool) {
    for c in 0..bn.channels() {
        let inv = 1.0 / (bn.running_var[c].as_f64() + bn.eps).sqrt();
        let a = T::from_f64_lossy(bn.scale[c].as_f64() * inv);
        let b = T::from_f64_lossy(bn.shift[c].as_f64() - bn.scale[c].as_f64() * inv * bn.running_mean[c].as_f64());
        for v in &mut x[c * spatial..(c + 1) * spatial] {
            let y = a * *v + b;
            *v = if relu && y < T::zero() { T::zero() } else { y };
        }
    }
}

/// Exponential moving average of the batch statistics (variance unbiased).
pub fn update_running<T: Real>(bn: &mut BatchNorm<T>, trace: &BnTrace<T>) {
    let mom = bn.momentum;
    let correction = if trace.count > 1 {
        trace.count as f64 / (trace.count - 1) as f64
    } else {
        1.0
    };
    for c in 0..bn.channels() {
        let rm = bn.running_mean[c].as_f64();
        let rv = bn.running_var[c].as_f64();
        bn.running_mean[c] = T::from_f64_lossy((1.0 - mom) * rm + mom * trace.mean[c]);
        bn.running_var[c] = T::from_f64_lossy((1.0 - mom) * rv + mom * trace.var[c] * correction);
    }
}

/// Backward through (optional ReLU ∘) scale/shift ∘ batch normalization.
///
/// `grad` holds `d loss / d output` on entry and `d loss / d input` on exit.
/// `output` is the forward output, used for the ReLU mask.
pub fn backward<T: Real>(
    bn: &BatchNorm<T>,
    trace: &BnTrace<T>,
    output: &[Vec<T>],
    grad: &mut [Vec<T>],
    spatial: usize,
    relu: bool,
    dscale: &mut [T],
    dshift: &mut [T],
) {
    let inv_std = trace.inv_std(bn.eps);
    let n = trace.count as f64;
    for c in 0..bn.channels() {
        let range = c * spatial..(c + 1) * spatial;
        if relu {
            for (g, y) in grad.iter_mut().zip(output) {
                for (gv, yv) in g[range.clone()].iter_mut().zip(&y[range.clone()]) {
                    if *yv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
        }
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for (g, xh) in grad.iter().zip(&trace.normalized) {
            for (gv, xv) in g[range.clone()].iter().zip(&xh[range.clone()]) {
                sum_dy += gv.as_f64();
                sum_dy_xhat += gv.as_f64() * xv.as_f64();
            }
        }
        dscale[c] = dscale[c] + T::from_f64_lossy(sum_dy_xhat);
        dshift[c] = dshift[c] + T::from_f64_lossy(sum_dy);
        let gamma = bn.scale[c].as_f64();
        let k = gamma * inv_std[c] / n;
        for (g, xh) in grad.iter_mut().zip(&trace.normalized) {
            for (gv, xv) in g[range.clone()].iter_mut().zip(&xh[range.clone()]) {
                let dx = k * (n * gv.as_f64() - sum_dy - xv.as_f64() * sum_dy_xhat);
                *gv = T::from_f64_lossy(dx);
            }
        }
    }
}

//! Single-sample 3D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Geometry of one cubic-kernel convolution with uniform stride and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input `[depth, height, width]`.
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Domain(format!(
                "kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        let mut output = [0; 3];
        for (o, &n) in output.iter_mut().zip(&input) {
            let padded = n + 2 * padding;
            if padded < kernel {
                return Err(Error::Shape(format!(
                    "input extent {n} with padding {padding} is smaller than kernel {kernel}"
                )));
            }
            *o = (padded - kernel) / stride + 1;
        }
        Ok(Self {
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    pub fn output_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.output_positions()
    }

    /// Rows of the unfolded input: one per (channel, kernel offset).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn col_len(&self) -> usize {
        self.patch_len() * self.output_positions()
    }

    /// Input index along one axis for an output position and kernel offset, if inside.
    #[inline]
    fn source(&self, out: usize, offset: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + offset) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `input` (`C×D×H×W`) into `col` (`C·k³ × Do·Ho·Wo`).
pub fn im2col<T: Real>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let positions = g.output_positions();
    for c in 0..g.in_channels {
        let channel = &input[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * positions..(row + 1) * positions];
                    let mut p = 0;
                    for z in 0..od {
                        let Some(iz) = g.source(z, kd, d) else {
                            dst[p..p + oh * ow].fill(T::zero());
                            p += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = g.source(y, kh, h) else {
                                dst[p..p + ow].fill(T::zero());
                                p += ow;
                                continue;
                            };
                            let src_row = &channel[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            for x in 0..ow {
                                dst[p] = match g.source(x, kw, w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `col` back onto `dinput`, accumulating overlapping contributions.
pub fn col2im<T: Real>(g: &ConvGeom, col: &[T], dinput: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let positions = g.output_positions();
    for c in 0..g.in_channels {
        let channel = &mut dinput[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &col[row * positions..(row + 1) * positions];
                    let mut p = 0;
                    for z in 0..od {
                        let Some(iz) = g.source(z, kd, d) else {
                            p += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = g.source(y, kh, h) else {
                                p += ow;
                                continue;
                            };
                            let dst_row = &mut channel[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            for x in 0..ow {
                                if let Some(ix) = g.source(x, kw, w) {
                                    dst_row[ix] = dst_row[ix] + src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = W · im2col(input) + bias`, `W` stored `O × C·k³`.
pub fn conv3d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    col: &mut Vec<T>,
) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(out.len(), g.output_len());
    col.resize(g.col_len(), T::zero());
    im2col(g, input, col);
    let positions = g.output_positions();
    for (o, row) in out.chunks_exact_mut(positions).enumerate() {
        row.fill(bias[o]);
    }
    let kk = g.patch_len();
    T::gemm(
        g.out_channels,
        kk,
        positions,
        T::one(),
        weight,
        kk as isize,
        1,
        col,
        positions as isize,
        1,
        T::one(),
        out,
        positions as isize,
        1,
    );
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
    col: &mut Vec<T>,
) {
    let positions = g.output_positions();
    let kk = g.patch_len();
    for (db, row) in dbias.iter_mut().zip(dout.chunks_exact(positions)) {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        *db = *db + T::from_f64_lossy(s);
    }
    col.resize(g.col_len(), T::zero());
    im2col(g, input, col);
    // dW (O × kk) += dout (O × P) · colᵀ (P × kk)
    T::gemm(
        g.out_channels,
        positions,
        kk,
        T::one(),
        dout,
        positions as isize,
        1,
        col,
        1,
        positions as isize,
        T::one(),
        dweight,
        kk as isize,
        1,
    );
    if let Some(dinput) = dinput {
        // dcol (kk × P) = Wᵀ (kk × O) · dout (O × P)
        T::gemm(
            kk,
            g.out_channels,
            positions,
            T::one(),
            weight,
            1,
            kk as isize,
            dout,
            positions as isize,
            1,
            T::zero(),
            col,
            positions as isize,
            1,
        );
        col2im(g, col, dinput);
    }
}

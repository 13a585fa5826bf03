//! Dense optical flow between grayscale frames and the flow tensors fed to the network.
//!
//! The solver is the classical Horn–Schunck fixed-point iteration. Brightness
//! derivatives come from the 2×2×2 cube stencils, which estimate them at the
//! centre of each 2×2 pixel cell, so the iteration runs on the `(W−1)×(H−1)`
//! cell grid. The result is interpolated back to pixel centres. The
//! neighbourhood average uses the 1/6 (edge) and 1/12 (corner) weights with
//! replicated borders. Derivatives are taken in 8-bit grey levels, so `alpha`
//! has the same units as in the classical formulation on 0–255 images.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_ITERATIONS: usize = 100;
/// Spatial and temporal extent of the full network input.
pub const TENSOR_SIZE: usize = 64;
pub const STD_FLOOR: f64 = 1e-6;
/// Brightness scale of the derivative stencils.
const GREY_LEVELS: f64 = 255.0;

/// Grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGray {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FrameGray {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} intensities, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "frame intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Converts interleaved 8-bit RGB to luma (0.299 R + 0.587 G + 0.114 B).
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "RGB frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| {
                let l = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                (l / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mirrored(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }
}

/// Per-pixel displacement in pixels per frame interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowParams {
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!(
                "smoothness weight alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Domain("at least one iteration is required".into()));
        }
        Ok(())
    }
}

/// Horn–Schunck iteration state for one frame pair.
pub struct HornSchunck {
    width: usize,
    height: usize,
    cols: usize,
    rows: usize,
    alpha2: f64,
    ex: Vec<f64>,
    ey: Vec<f64>,
    et: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    u_avg: Vec<f64>,
    v_avg: Vec<f64>,
    /// `ex / (alpha² + ex² + ey²)` and likewise for `ey`.
    gx: Vec<f64>,
    gy: Vec<f64>,
}

const EDGE_W: f64 = 1.0 / 6.0;
const CORNER_W: f64 = 1.0 / 12.0;

impl HornSchunck {
    pub fn new(a: &FrameGray, b: &FrameGray, alpha: f64) -> Result<Self> {
        if a.width != b.width || a.height != b.height {
            return Err(Error::Shape(format!(
                "frame sizes differ: {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
        FlowParams {
            alpha,
            iterations: 1,
        }
        .validate()?;
        if a.width < 2 || a.height < 2 {
            return Err(Error::Domain(format!(
                "flow needs frames of at least 2x2 pixels, got {}x{}",
                a.width, a.height
            )));
        }
        let (w, cols, rows) = (a.width, a.width - 1, a.height - 1);
        let n = cols * rows;
        let (mut ex, mut ey, mut et) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let (ad, bd) = (&a.data, &b.data);
        const STENCIL: f64 = 0.25 * GREY_LEVELS;
        for i in 0..rows {
            for j in 0..cols {
                let (p00, p01, p10, p11) = (i * w + j, i * w + j + 1, (i + 1) * w + j, (i + 1) * w + j + 1);
                let c = i * cols + j;
                // pairs are grouped so that a horizontal mirror only swaps operands within a pair
                ex[c] = STENCIL
                    * (((ad[p01] - ad[p00]) + (ad[p11] - ad[p10]))
                        + ((bd[p01] - bd[p00]) + (bd[p11] - bd[p10])));
                ey[c] = STENCIL
                    * (((ad[p10] - ad[p00]) + (ad[p11] - ad[p01]))
                        + ((bd[p10] - bd[p00]) + (bd[p11] - bd[p01])));
                et[c] = STENCIL
                    * (((bd[p00] - ad[p00]) + (bd[p01] - ad[p01]))
                        + ((bd[p10] - ad[p10]) + (bd[p11] - ad[p11])));
            }
        }
        let alpha2 = alpha * alpha;
        let den: Vec<f64> = ex.iter().zip(&ey).map(|(x, y)| alpha2 + x * x + y * y).collect();
        let gx = ex.iter().zip(&den).map(|(x, d)| x / d).collect();
        let gy = ey.iter().zip(&den).map(|(y, d)| y / d).collect();
        Ok(Self {
            width: a.width,
            height: a.height,
            cols,
            rows,
            alpha2,
            ex,
            ey,
            et,
            u: vec![0.0; n],
            v: vec![0.0; n],
            u_avg: vec![0.0; n],
            v_avg: vec![0.0; n],
            gx,
            gy,
        })
    }

    fn average(field: &[f64], out: &mut [f64], cols: usize, rows: usize) {
        for i in 0..rows {
            let up = &field[i.saturating_sub(1) * cols..][..cols];
            let mid = &field[i * cols..][..cols];
            let down = &field[(i + 1).min(rows - 1) * cols..][..cols];
            let o = &mut out[i * cols..][..cols];
            let clamped = |j: usize| {
                let l = j.saturating_sub(1);
                let r = (j + 1).min(cols - 1);
                let edges = (mid[l] + mid[r]) + (up[j] + down[j]);
                let corners = (up[l] + up[r]) + (down[l] + down[r]);
                EDGE_W * edges + CORNER_W * corners
            };
            o[0] = clamped(0);
            o[cols - 1] = clamped(cols - 1);
            if cols > 2 {
                let interior = o[1..cols - 1]
                    .iter_mut()
                    .zip(up.windows(3).zip(mid.windows(3)).zip(down.windows(3)));
                for (o, ((u, m), d)) in interior {
                    let edges = (m[0] + m[2]) + (u[1] + d[1]);
                    let corners = (u[0] + u[2]) + (d[0] + d[2]);
                    *o = EDGE_W * edges + CORNER_W * corners;
                }
            }
        }
    }

    /// One Jacobi sweep of the Horn–Schunck update.
    pub fn step(&mut self) {
        Self::average(&self.u, &mut self.u_avg, self.cols, self.rows);
        Self::average(&self.v, &mut self.v_avg, self.cols, self.rows);
        let cells = self
            .u
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(self.u_avg.iter().zip(&self.v_avg))
            .zip(self.ex.iter().zip(&self.ey).zip(&self.et))
            .zip(self.gx.iter().zip(&self.gy));
        for ((((u, v), (ua, va)), ((ex, ey), et)), (gx, gy)) in cells {
            let residual = ex * ua + ey * va + et;
            *u = ua - gx * residual;
            *v = va - gy * residual;
        }
    }

    /// Data term plus `alpha²` times the weighted squared neighbour differences.
    ///
    /// Each unordered neighbour pair is counted once; this is the quadratic
    /// whose blockwise minimizer is the update performed by [`Self::step`].
    pub fn energy(&self) -> f64 {
        let (cols, rows) = (self.cols, self.rows);
        let mut data = 0.0;
        for c in 0..self.u.len() {
            let r = self.ex[c] * self.u[c] + self.ey[c] * self.v[c] + self.et[c];
            data += r * r;
        }
        let mut smooth = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let c = i * cols + j;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ni = (i as i64 + di).clamp(0, rows as i64 - 1) as usize;
                        let nj = (j as i64 + dj).clamp(0, cols as i64 - 1) as usize;
                        let w = if di == 0 || dj == 0 { EDGE_W } else { CORNER_W };
                        let q = ni * cols + nj;
                        let (du, dv) = (self.u[c] - self.u[q], self.v[c] - self.v[q]);
                        smooth += w * (du * du + dv * dv);
                    }
                }
            }
        }
        data + self.alpha2 * 0.5 * smooth
    }

    /// Current iterate interpolated from cell centres to pixel centres.
    pub fn flow(&self) -> FlowField {
        let (cols, rows) = (self.cols, self.rows);
        let mut out = FlowField::zeros(self.width, self.height);
        for y in 0..self.height {
            let r0 = y.saturating_sub(1).min(rows - 1) * cols;
            let r1 = y.min(rows - 1) * cols;
            for x in 0..self.width {
                let c0 = x.saturating_sub(1).min(cols - 1);
                let c1 = x.min(cols - 1);
                let p = y * self.width + x;
                out.u[p] = 0.25
                    * ((self.u[r0 + c0] + self.u[r0 + c1]) + (self.u[r1 + c0] + self.u[r1 + c1]));
                out.v[p] = 0.25
                    * ((self.v[r0 + c0] + self.v[r0 + c1]) + (self.v[r1 + c0] + self.v[r1 + c1]));
            }
        }
        out
    }
}

/// Flow from `a` to `b` after `iterations` sweeps from a zero field.
pub fn horn_schunck(a: &FrameGray, b: &FrameGray, alpha: f64, iterations: usize) -> Result<FlowField> {
    FlowParams { alpha, iterations }.validate()?;
    let mut solver = HornSchunck::new(a, b, alpha)?;
    for _ in 0..iterations {
        solver.step();
    }
    Ok(solver.flow())
}

/// Min/max used to map each flow component onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FlowNormalization {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0, 1]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let p = (y * self.width + x) * 3;
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

fn normalize(values: &[f64]) -> (f64, f64, Vec<f64>) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mapped = if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.5; values.len()]
    };
    (min, max, mapped)
}

/// Red 0, green = normalized u, blue = normalized v.
pub fn flow_to_rgb(flow: &FlowField) -> Result<(RgbImage, FlowNormalization)> {
    if flow.u.iter().chain(&flow.v).any(|x| !x.is_finite()) {
        return Err(Error::Domain("flow field contains non-finite values".into()));
    }
    let (u_min, u_max, g) = normalize(&flow.u);
    let (v_min, v_max, b) = normalize(&flow.v);
    let mut data = Vec::with_capacity(g.len() * 3);
    for (g, b) in g.into_iter().zip(b) {
        data.extend([0.0, g, b]);
    }
    Ok((
        RgbImage {
            width: flow.width,
            height: flow.height,
            data,
        },
        FlowNormalization {
            u_min,
            u_max,
            v_min,
            v_max,
        },
    ))
}

/// Bilinear resize with edge clamping (pixel-centre aligned).
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, out_w);
    let ys = taps(height, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
            let bottom = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Two-channel flow volume `(u, v) × time × height × width`, cubic extent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowClipTensor {
    size: usize,
    data: Vec<f32>,
}

impl FlowClipTensor {
    pub const CHANNELS: usize = 2;

    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        let expect = Self::CHANNELS * size * size * size;
        if size == 0 || data.len() != expect {
            return Err(Error::Shape(format!(
                "flow tensor of size {size} needs {expect} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("flow tensor contains non-finite values".into()));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `[channels, depth, height, width]`.
    pub fn shape(&self) -> [usize; 4] {
        [Self::CHANNELS, self.size, self.size, self.size]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size.pow(3);
        &self.data[c * n..(c + 1) * n]
    }
}

/// Flow for frame pairs `(t, t+1)`, `t = 0..size`, resized to `size × size`,
/// stacked, and standardized per channel over the whole clip.
pub fn clip_to_tensor(frames: &[FrameGray], params: FlowParams, size: usize) -> Result<FlowClipTensor> {
    params.validate()?;
    if size == 0 {
        return Err(Error::Domain("tensor size must be positive".into()));
    }
    if frames.len() < size + 1 {
        return Err(Error::Domain(format!(
            "{} flow steps need at least {} frames, got {}",
            size,
            size + 1,
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.width != w || f.height != h) {
        return Err(Error::Shape(format!(
            "frame {i} is {}x{}, expected {w}x{h}",
            f.width, f.height
        )));
    }
    let steps: Vec<(Vec<f64>, Vec<f64>)> = (0..size)
        .into_par_iter()
        .map(|t| {
            let flow = horn_schunck(&frames[t], &frames[t + 1], params.alpha, params.iterations)?;
            Ok((
                resize_bilinear(&flow.u, w, h, size, size),
                resize_bilinear(&flow.v, w, h, size, size),
            ))
        })
        .collect::<Result<_>>()?;

    let plane = size * size;
    let volume = plane * size;
    let mut data = vec![0.0f32; 2 * volume];
    for c in 0..2 {
        let values: Vec<f64> = steps
            .iter()
            .flat_map(|(u, v)| if c == 0 { u.iter() } else { v.iter() })
            .copied()
            .collect();
        let mean = values.iter().sum::<f64>() / volume as f64;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / volume as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for (dst, x) in data[c * volume..(c + 1) * volume].iter_mut().zip(values) {
            *dst = ((x - mean) / std) as f32;
        }
    }
    FlowClipTensor::new(size, data)
}

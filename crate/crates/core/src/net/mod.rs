//! The 3D convolutional backbone and its ordinal head.
//!
//! Blocks 1–4 are `conv(k=4, s=2, p=1) → batch-norm → ReLU`, block 5 is a bare
//! `conv(k=4, s=1, p=0)` collapsing `4³` to a single position, and the
//! resulting 32 features feed the [`CoralHead`]. [`Architecture::standard`] is
//! the full-size network; smaller variants keep the same block pattern.

pub mod batchnorm;
pub mod conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowClipTensor;
use crate::ordinal::{head_backward, head_logits, CoralHead, HeadGrad, RankScale};
use crate::scalar::Real;

pub use batchnorm::BatchNorm;
use batchnorm::BnTrace;
use conv::ConvGeom;

pub const INPUT_CHANNELS: usize = FlowClipTensor::CHANNELS;
pub const FEATURE_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Batch-norm followed by ReLU after the convolution.
    pub batch_norm: bool,
}

impl BlockSpec {
    fn encode(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.out_channels,
            self.kernel,
            self.stride,
            self.padding,
            if self.batch_norm { "bn" } else { "plain" }
        )
    }

    fn decode(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Domain(format!("malformed block description `{s}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let num = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        Ok(Self {
            out_channels: num(0)?,
            kernel: num(1)?,
            stride: num(2)?,
            padding: num(3)?,
            batch_norm: match parts[4] {
                "bn" => true,
                "plain" => false,
                _ => return Err(bad()),
            },
        })
    }
}

/// Input extent and block stack of a backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_size: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    /// The full network: `2×64³ → 64×32³ → 128×16³ → 256×8³ → 512×4³ → 32×1³`.
    pub fn standard() -> Self {
        Self::strided(64, &[64, 128, 256, 512])
    }

    /// `encoder_channels.len()` stride-2 blocks halving `input_size` each time,
    /// then a final unpadded block whose kernel covers what remains.
    pub fn strided(input_size: usize, encoder_channels: &[usize]) -> Self {
        let mut blocks: Vec<BlockSpec> = encoder_channels
            .iter()
            .map(|&c| BlockSpec {
                out_channels: c,
                kernel: 4,
                stride: 2,
                padding: 1,
                batch_norm: true,
            })
            .collect();
        blocks.push(BlockSpec {
            out_channels: FEATURE_DIM,
            kernel: input_size >> encoder_channels.len(),
            stride: 1,
            padding: 0,
            batch_norm: false,
        });
        Self { input_size, blocks }
    }

    /// `[channels, depth, height, width]` of the input and of every block output.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 4]>> {
        let mut shapes = vec![[INPUT_CHANNELS, self.input_size, self.input_size, self.input_size]];
        for (i, geom) in self.geometries()?.iter().enumerate() {
            let [d, h, w] = geom.output;
            debug_assert_eq!(geom.out_channels, self.blocks[i].out_channels);
            shapes.push([geom.out_channels, d, h, w]);
        }
        Ok(shapes)
    }

    pub fn geometries(&self) -> Result<Vec<ConvGeom>> {
        let mut channels = INPUT_CHANNELS;
        let mut extent = [self.input_size; 3];
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let g = ConvGeom::new(channels, b.out_channels, extent, b.kernel, b.stride, b.padding)
                .map_err(|e| Error::Shape(format!("block {}: {e}", i + 1)))?;
            channels = b.out_channels;
            extent = g.output;
            out.push(g);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Domain("architecture has no blocks".into()));
        }
        let shapes = self.layer_shapes()?;
        let last = shapes.last().expect("non-empty");
        if last[1..] != [1, 1, 1] {
            return Err(Error::Shape(format!(
                "final block must reduce to a single position, got {:?}",
                last
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Number of leading blocks that form the transferable encoder (all but the last).
    pub fn encoder_blocks(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    pub fn encode(&self) -> String {
        let blocks: Vec<String> = self.blocks.iter().map(BlockSpec::encode).collect();
        format!("{}|{}", self.input_size, blocks.join(","))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let (size, blocks) = s
            .split_once('|')
            .ok_or_else(|| Error::Domain(format!("malformed architecture `{s}`")))?;
        let input_size = size
            .parse()
            .map_err(|_| Error::Domain(format!("malformed input size in `{s}`")))?;
        let blocks = blocks
            .split(',')
            .filter(|b| !b.is_empty())
            .map(BlockSpec::decode)
            .collect::<Result<_>>()?;
        Ok(Self { input_size, blocks })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dBlock<T> {
    pub spec: BlockSpec,
    pub in_channels: usize,
    /// `out × in × k × k × k`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Real> Conv3dBlock<T> {
    /// He-uniform weights, zero bias, unit/zero batch-norm.
    fn init(spec: BlockSpec, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * spec.kernel.pow(3);
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = spec.out_channels * fan_in;
        let weight = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Self {
            spec,
            in_channels,
            weight,
            bias: vec![T::zero(); spec.out_channels],
            bn: spec.batch_norm.then(|| BatchNorm::new(spec.out_channels)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self.bn.as_ref().map_or(0, |bn| bn.scale.len() + bn.shift.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Network parameters. The first `frozen_blocks` blocks are gradient-exempt:
/// in train mode they use running statistics and are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub arch: Architecture,
    pub scale: RankScale,
    pub blocks: Vec<Conv3dBlock<T>>,
    pub head: CoralHead<T>,
    pub frozen_blocks: usize,
}

/// Activations kept by a forward pass for [`BackboneParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    /// `acts[0]` is the input, `acts[i]` the output of block `i`.
    acts: Vec<Vec<Vec<T>>>,
    bn: Vec<Option<BnTrace<T>>>,
    frozen_blocks: usize,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].len()
    }

    /// Output of the last evaluated block, one buffer per sample.
    pub fn output(&self) -> &[Vec<T>] {
        self.acts.last().expect("input is always present")
    }

    pub fn blocks_evaluated(&self) -> usize {
        self.acts.len() - 1
    }

    /// Input (`0`) or output of block `i`, one buffer per sample.
    pub fn activation(&self, i: usize) -> Option<&[Vec<T>]> {
        self.acts.get(i).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<BlockGrad<T>>,
    pub head: HeadGrad<T>,
    /// `d loss / d input` per sample, when requested.
    pub input: Option<Vec<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &BackboneParams<T>) -> Self {
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockGrad {
                    weight: vec![T::zero(); b.weight.len()],
                    bias: vec![T::zero(); b.bias.len()],
                    bn_scale: vec![T::zero(); b.bn.as_ref().map_or(0, |bn| bn.channels())],
                    bn_shift: vec![T::zero(); b.bn.as_ref().map_or(0, |bn| bn.channels())],
                })
                .collect(),
            head: HeadGrad::zeros_like(&params.head),
            input: None,
        }
    }

    /// Gradient buffers in [`BackboneParams::trainable_mut`] order.
    pub fn slices(&self, frozen_blocks: usize) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks[frozen_blocks..] {
            out.extend([&b.weight[..], &b.bias[..], &b.bn_scale[..], &b.bn_shift[..]]);
        }
        out.push(&self.head.projection);
        out.push(std::slice::from_ref(&self.head.bias_base));
        out.push(&self.head.decrement_raw);
        out
    }

    pub fn slices_mut(&mut self, frozen_blocks: usize) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks[frozen_blocks..] {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.bn_scale);
            out.push(&mut b.bn_shift);
        }
        out.push(&mut self.head.projection);
        out.push(std::slice::from_mut(&mut self.head.bias_base));
        out.push(&mut self.head.decrement_raw);
        out
    }
}

impl<T: Real> BackboneParams<T> {
    /// Freshly initialized network; all randomness comes from `seed`.
    pub fn init(arch: Architecture, scale: RankScale, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = INPUT_CHANNELS;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for spec in &arch.blocks {
            blocks.push(Conv3dBlock::init(*spec, in_ch, &mut rng));
            in_ch = spec.out_channels;
        }
        let mut head = CoralHead::new(arch.feature_dim(), scale);
        let bound = 1.0 / (head.projection.len() as f64).sqrt();
        for w in &mut head.projection {
            *w = T::from_f64_lossy(rng.random_range(-bound..bound));
        }
        Ok(Self {
            arch,
            scale,
            blocks,
            head,
            frozen_blocks: 0,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(Conv3dBlock::parameter_count).sum::<usize>()
            + self.head.parameter_count()
    }

    /// Trainable parameter buffers: per unfrozen block weight, bias, bn scale,
    /// bn shift; then head projection, base bias, raw decrements.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks[self.frozen_blocks..] {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            match &mut b.bn {
                Some(bn) => {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
                None => {
                    out.push(&mut []);
                    out.push(&mut []);
                }
            }
        }
        out.push(&mut self.head.projection);
        out.push(std::slice::from_mut(&mut self.head.bias_base));
        out.push(&mut self.head.decrement_raw);
        out
    }

    /// L2 norm of every learnable parameter (running statistics excluded).
    pub fn parameter_norm(&self) -> f64 {
        let mut ss = 0.0f64;
        let mut add = |xs: &[T]| ss += xs.iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
        for b in &self.blocks {
            add(&b.weight);
            add(&b.bias);
            if let Some(bn) = &b.bn {
                add(&bn.scale);
                add(&bn.shift);
            }
        }
        add(&self.head.projection);
        add(std::slice::from_ref(&self.head.bias_base));
        add(&self.head.decrement_raw);
        ss.sqrt()
    }

    fn check_input(&self, batch: &[Vec<T>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let s = self.arch.input_size;
        let expect = INPUT_CHANNELS * s * s * s;
        if let Some((i, x)) = batch.iter().enumerate().find(|(_, x)| x.len() != expect) {
            return Err(Error::Shape(format!(
                "layer 0 (input), sample {i}: expected {:?} = {expect} values, got {}",
                [INPUT_CHANNELS, s, s, s],
                x.len()
            )));
        }
        Ok(())
    }

    /// Runs the first `upto` blocks. Train mode records what backward needs;
    /// frozen blocks always use running statistics.
    pub fn forward_blocks(&self, batch: &[Vec<T>], mode: Mode, upto: usize) -> Result<ForwardCache<T>> {
        self.check_input(batch)?;
        let geoms = self.arch.geometries()?;
        if upto > geoms.len() {
            return Err(Error::Domain(format!(
                "requested {upto} blocks of a {}-block network",
                geoms.len()
            )));
        }
        let mut acts = vec![batch.to_vec()];
        let mut bn_traces = Vec::with_capacity(upto);
        let mut col = Vec::new();
        for (i, (block, g)) in self.blocks.iter().zip(&geoms).take(upto).enumerate() {
            if block.weight.len() != g.weight_len() || block.in_channels != g.in_channels {
                return Err(Error::Shape(format!(
                    "layer {}: weights hold {} values for {} input channels, geometry needs {} for {}",
                    i + 1,
                    block.weight.len(),
                    block.in_channels,
                    g.weight_len(),
                    g.in_channels
                )));
            }
            let input = acts.last().expect("non-empty");
            let mut out: Vec<Vec<T>> = input
                .iter()
                .map(|x| {
                    let mut y = vec![T::zero(); g.output_len()];
                    conv::conv3d_forward(g, x, &block.weight, &block.bias, &mut y, &mut col);
                    y
                })
                .collect();
            let spatial = g.output_positions();
            let trace = match (&block.bn, mode) {
                (Some(bn), Mode::Train) if i >= self.frozen_blocks => {
                    Some(batchnorm::forward_train(bn, &mut out, spatial, true))
                }
                (Some(bn), _) => {
                    for y in &mut out {
                        batchnorm::forward_infer(bn, y, spatial, true);
                    }
                    None
                }
                (None, _) => None,
            };
            bn_traces.push(trace);
            acts.push(out);
        }
        Ok(ForwardCache {
            mode,
            acts,
            bn: bn_traces,
            frozen_blocks: self.frozen_blocks,
        })
    }

    /// Full forward pass. Train mode uses batch statistics and updates the
    /// running statistics of every unfrozen batch-norm layer.
    pub fn forward(&mut self, batch: &[Vec<T>], mode: Mode) -> Result<(Vec<Vec<T>>, ForwardCache<T>)> {
        let cache = self.forward_blocks(batch, mode, self.blocks.len())?;
        if mode == Mode::Train {
            self.apply_running_stats(&cache);
        }
        let logits = self.logits_from(&cache)?;
        Ok((logits, cache))
    }

    /// Inference without touching any state.
    pub fn infer(&self, batch: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        let cache = self.forward_blocks(batch, Mode::Infer, self.blocks.len())?;
        self.logits_from(&cache)
    }

    pub fn apply_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (block, trace) in self.blocks.iter_mut().zip(&cache.bn) {
            if let (Some(bn), Some(trace)) = (&mut block.bn, trace) {
                batchnorm::update_running(bn, trace);
            }
        }
    }

    fn logits_from(&self, cache: &ForwardCache<T>) -> Result<Vec<Vec<T>>> {
        cache
            .output()
            .iter()
            .map(|f| head_logits(f, &self.head))
            .collect()
    }

    /// Reverse-mode gradients for all parameters and the input.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &[Vec<T>]) -> Result<Gradients<T>> {
        self.backward_with(cache, grad_logits, true)
    }

    /// Like [`Self::backward`] but skips the input gradient unless `want_input`.
    pub fn backward_with(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &[Vec<T>],
        want_input: bool,
    ) -> Result<Gradients<T>> {
        if cache.blocks_evaluated() != self.blocks.len() {
            return Err(Error::State(format!(
                "cache covers {} of {} blocks",
                cache.blocks_evaluated(),
                self.blocks.len()
            )));
        }
        if grad_logits.len() != cache.batch_size() {
            return Err(Error::Shape(format!(
                "{} logit gradients for a batch of {}",
                grad_logits.len(),
                cache.batch_size()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let dfeat = grad_logits
            .iter()
            .zip(cache.output())
            .map(|(g, f)| head_backward(f, &self.head, g, &mut grads.head))
            .collect::<Result<Vec<_>>>()?;
        self.backward_blocks(cache, dfeat, &mut grads, want_input)?;
        Ok(grads)
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the cache's last output)
    /// through every unfrozen block, accumulating into `grads`.
    pub fn backward_blocks(
        &self,
        cache: &ForwardCache<T>,
        grad_out: Vec<Vec<T>>,
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::State(
                "backward needs a cache from a train-mode forward pass".into(),
            ));
        }
        if cache.frozen_blocks != self.frozen_blocks {
            return Err(Error::State(format!(
                "cache was recorded with {} frozen blocks, parameters have {}",
                cache.frozen_blocks, self.frozen_blocks
            )));
        }
        let geoms = self.arch.geometries()?;
        let upto = cache.blocks_evaluated();
        let stop = if want_input { 0 } else { self.frozen_blocks };
        let mut grad = grad_out;
        let mut col = Vec::new();
        for i in (stop..upto).rev() {
            let (block, g) = (&self.blocks[i], &geoms[i]);
            let trainable = i >= self.frozen_blocks;
            let spatial = g.output_positions();
            if let Some(bn) = &block.bn {
                let bg = &mut grads.blocks[i];
                match &cache.bn[i] {
                    Some(trace) => batchnorm::backward(
                        bn,
                        trace,
                        &cache.acts[i + 1],
                        &mut grad,
                        spatial,
                        true,
                        &mut bg.bn_scale,
                        &mut bg.bn_shift,
                    ),
                    None => frozen_bn_backward(bn, &cache.acts[i + 1], &mut grad, spatial),
                }
            }
            let need_dinput = i > stop || want_input;
            let mut next: Vec<Vec<T>> = Vec::with_capacity(grad.len());
            let bg = &mut grads.blocks[i];
            let mut scratch_w = vec![T::zero(); if trainable { 0 } else { block.weight.len() }];
            let mut scratch_b = vec![T::zero(); if trainable { 0 } else { block.bias.len() }];
            for (x, dy) in cache.acts[i].iter().zip(&grad) {
                let mut dx = vec![T::zero(); if need_dinput { g.input_len() } else { 0 }];
                let (dw, db) = if trainable {
                    (&mut bg.weight[..], &mut bg.bias[..])
                } else {
                    (&mut scratch_w[..], &mut scratch_b[..])
                };
                conv::conv3d_backward(
                    g,
                    x,
                    &block.weight,
                    dy,
                    dw,
                    db,
                    need_dinput.then_some(&mut dx[..]),
                    &mut col,
                );
                next.push(dx);
            }
            grad = next;
        }
        if want_input {
            grads.input = Some(grad);
        }
        Ok(())
    }
}

/// Backward through the running-statistics affine map and ReLU.
fn frozen_bn_backward<T: Real>(bn: &BatchNorm<T>, output: &[Vec<T>], grad: &mut [Vec<T>], spatial: usize) {
    for c in 0..bn.channels() {
        let a = T::from_f64_lossy(bn.scale[c].as_f64() / (bn.running_var[c].as_f64() + bn.eps).sqrt());
        for (g, y) in grad.iter_mut().zip(output) {
            for (gv, yv) in g[c * spatial..(c + 1) * spatial]
                .iter_mut()
                .zip(&y[c * spatial..(c + 1) * spatial])
            {
                *gv = if *yv <= T::zero() { T::zero() } else { *gv * a };
            }
        }
    }
}

/// Network input buffer for one flow tensor.
pub fn tensor_input<T: Real>(t: &FlowClipTensor) -> Vec<T> {
    t.data().iter().map(|v| T::from_f64_lossy(f64::from(*v))).collect()
}

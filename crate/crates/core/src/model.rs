//! The voxel-embedding network: stride-4 stem, UNet-style encoder/decoder at quarter
//! resolution, 1x1x1 projection to three channels, affine-free batch normalization and a
//! trilinear x4 upsample back to the input grid.

use ndarray::{Array3, Array4, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, resize, resize_backward, Conv3d, Feature, Real};

pub const STEM_STRIDE: usize = 4;
pub const UPSAMPLE_FACTOR: usize = 4;
pub const EMBED_DIM: usize = 3;
/// Input intensities are divided by this before the first layer.
pub const HU_SCALE: f32 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub encoder_channels: Vec<usize>,
    /// One entry per upsampling stage; must be one shorter than `encoder_channels`.
    pub decoder_channels: Vec<usize>,
    pub kernel_size: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub negative_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            encoder_channels: vec![16, 32, 64],
            decoder_channels: vec![64, 32],
            kernel_size: 3,
            norm_eps: 1e-8,
            bn_momentum: 0.1,
            negative_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("model: {m}")));
        if self.stem_channels == 0 {
            return bad("stem_channels must be positive");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder_channels must be a nonempty list of positive widths");
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() {
            return bad("decoder_channels must have one entry fewer than encoder_channels");
        }
        if self.decoder_channels.contains(&0) {
            return bad("decoder_channels must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope < 1.0) {
            return bad("negative_slope must lie in [0, 1)");
        }
        Ok(())
    }

    /// Smallest accepted patch extent along any axis.
    pub fn min_patch_size(&self) -> usize {
        STEM_STRIDE << (self.encoder_channels.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: Option<Conv3d>,
    conv: Conv3d,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: Conv3d,
    stages: Vec<Stage>,
    decoder: Vec<Conv3d>,
    head: Conv3d,
    len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut conv = |cin, cout, kernel, stride, pad| {
            let c = Conv3d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                pad,
                weight_offset: offset,
            };
            offset += c.param_len();
            c
        };
        let k = cfg.kernel_size;
        let stem = conv(1, cfg.stem_channels, STEM_STRIDE, STEM_STRIDE, 0);
        let mut stages = Vec::new();
        let mut prev = cfg.stem_channels;
        for (i, &ch) in cfg.encoder_channels.iter().enumerate() {
            let down = (i > 0).then(|| conv(prev, ch, k, 2, k / 2));
            let cin = if i > 0 { ch } else { prev };
            stages.push(Stage {
                down,
                conv: conv(cin, ch, k, 1, k / 2),
            });
            prev = ch;
        }
        let enc = &cfg.encoder_channels;
        let mut decoder = Vec::new();
        for (j, &ch) in cfg.decoder_channels.iter().enumerate() {
            let skip = enc[enc.len() - 2 - j];
            decoder.push(conv(prev + skip, ch, k, 1, k / 2));
            prev = ch;
        }
        let head = conv(prev, EMBED_DIM, 1, 1, 0);
        Self {
            stem,
            stages,
            decoder,
            head,
            len: offset,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv3d> {
        std::iter::once(&self.stem)
            .chain(self.stages.iter().flat_map(|s| s.down.iter().chain(std::iter::once(&s.conv))))
            .chain(self.decoder.iter())
            .chain(std::iter::once(&self.head))
    }
}

/// Activations retained from one convolution for the backward pass.
struct ConvTape<T> {
    col: Vec<T>,
    in_dims: [usize; 3],
    out: Feature<T>,
}

struct PatchTape<T> {
    in_dims: [usize; 3],
    padded: [usize; 3],
    stem: ConvTape<T>,
    stages: Vec<(Option<ConvTape<T>>, ConvTape<T>)>,
    /// Dims of the tensor that was upsampled into each decoder stage.
    decoder: Vec<([usize; 3], ConvTape<T>)>,
    head: ConvTape<T>,
}

/// Result of a train-mode forward pass, holding what [`ApeModel::backward`] needs.
pub struct TrainForward<T> {
    /// Full-resolution embedding maps, one per input patch.
    pub maps: Vec<Feature<T>>,
    /// Normalized quarter-resolution maps (the layer right before upsampling).
    pub normalized: Vec<Feature<T>>,
    pub batch_mean: [f64; 3],
    pub batch_var: [f64; 3],
    tapes: Vec<PatchTape<T>>,
}

/// Network parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ApeModel<T> {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<T>,
    pub running_mean: [f64; 3],
    pub running_var: [f64; 3],
    pub step: u64,
}

impl<T: Real> ApeModel<T> {
    /// He-initialized weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in layout.convs() {
            let fan_in = (c.in_channels * c.kernel.pow(3)) as f64;
            let gain = if c == &layout.head { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            for w in &mut params[c.weight_offset..c.weight_offset + c.weight_len()] {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            running_mean: [0.0; 3],
            running_var: [1.0; 3],
            step: 0,
        })
    }

    /// Rebuilds a model from stored state; checks the parameter count against the config.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<T>,
        running_mean: [f64; 3],
        running_var: [f64; 3],
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch(format!(
                "config implies {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        if running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("running variance must be positive".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
            running_mean,
            running_var,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Converts parameters to another float type.
    pub fn cast<U: Real>(&self) -> ApeModel<U> {
        ApeModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::lit(p.f64())).collect(),
            running_mean: self.running_mean,
            running_var: self.running_var,
            step: self.step,
        }
    }

    fn check_size(&self, dims: [usize; 3]) -> Result<()> {
        let min = self.config.min_patch_size();
        if dims.iter().any(|&n| n < min) {
            return Err(Error::PatchTooSmall { min, got: dims });
        }
        Ok(())
    }

    fn slope(&self) -> T {
        T::lit(self.config.negative_slope)
    }

    fn conv_act(&self, conv: &Conv3d, x: &Feature<T>, act: bool) -> ConvTape<T> {
        let (mut out, col) = conv.forward(&self.params, x);
        if act {
            leaky_relu(&mut out, self.slope());
        }
        ConvTape {
            col,
            in_dims: x.dims,
            out,
        }
    }

    /// Runs everything up to (excluding) the normalization layer.
    fn forward_features(&self, patch: ArrayView3<f32>) -> PatchTape<T> {
        let sh = patch.shape();
        let in_dims = [sh[0], sh[1], sh[2]];
        let padded = in_dims.map(|n| n.div_ceil(STEM_STRIDE) * STEM_STRIDE);
        let x = Feature {
            channels: 1,
            dims: in_dims,
            data: patch.iter().map(|&v| T::lit((v / HU_SCALE) as f64)).collect(),
        }
        .pad_replicate(padded);

        let stem = self.conv_act(&self.layout.stem, &x, true);
        let mut stages: Vec<(Option<ConvTape<T>>, ConvTape<T>)> = Vec::new();
        for stage in &self.layout.stages {
            let input = match stages.last() {
                Some((_, t)) => &t.out,
                None => &stem.out,
            };
            let down = stage.down.as_ref().map(|d| self.conv_act(d, input, true));
            let conv_in = down.as_ref().map_or(input, |t| &t.out);
            let conv = self.conv_act(&stage.conv, conv_in, true);
            stages.push((down, conv));
        }
        let mut decoder: Vec<([usize; 3], ConvTape<T>)> = Vec::new();
        let n = stages.len();
        for (j, conv) in self.layout.decoder.iter().enumerate() {
            let cur = match decoder.last() {
                Some((_, t)) => &t.out,
                None => &stages[n - 1].1.out,
            };
            let skip = &stages[n - 2 - j].1.out;
            let up = resize(cur, skip.dims);
            let cat = Feature::concat(&up, skip);
            decoder.push((cur.dims, self.conv_act(conv, &cat, true)));
        }
        let last = match decoder.last() {
            Some((_, t)) => &t.out,
            None => &stages[n - 1].1.out,
        };
        let head = self.conv_act(&self.layout.head, last, false);
        PatchTape {
            in_dims,
            padded,
            stem,
            stages,
            decoder,
            head,
        }
    }

    fn backward_features(&self, tape: &PatchTape<T>, dz: Feature<T>, grads: &mut [T]) {
        let slope = self.slope();
        let p = &self.params;
        let n = tape.stages.len();
        let mut d_skips: Vec<Option<Feature<T>>> = (0..n).map(|_| None).collect();
        let add = |slot: &mut Option<Feature<T>>, g: Feature<T>| match slot {
            Some(s) => s.add_assign(&g),
            None => *slot = Some(g),
        };

        let mut d = self.layout.head
            .backward(p, &tape.head.col, tape.head.in_dims, &dz, grads, true)
            .expect("input grad requested");
        for (j, conv) in self.layout.decoder.iter().enumerate().rev() {
            let (up_from, t) = &tape.decoder[j];
            leaky_relu_backward(&t.out, &mut d, slope);
            let dcat = conv.backward(p, &t.col, t.in_dims, &d, grads, true).expect("input grad");
            let up_channels = dcat.channels - self.config.encoder_channels[n - 2 - j];
            let (dup, dskip) = dcat.split(up_channels);
            add(&mut d_skips[n - 2 - j], dskip);
            d = resize_backward(&dup, *up_from);
        }
        add(&mut d_skips[n - 1], d);

        let mut carry: Option<Feature<T>> = None;
        for (i, stage) in self.layout.stages.iter().enumerate().rev() {
            let mut g = d_skips[i].take().expect("every stage feeds the decoder");
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let (down_tape, conv_tape) = &tape.stages[i];
            leaky_relu_backward(&conv_tape.out, &mut g, slope);
            let mut g = stage.conv
                .backward(p, &conv_tape.col, conv_tape.in_dims, &g, grads, true)
                .expect("input grad");
            if let (Some(down), Some(dt)) = (&stage.down, down_tape) {
                leaky_relu_backward(&dt.out, &mut g, slope);
                g = down.backward(p, &dt.col, dt.in_dims, &g, grads, true).expect("input grad");
            }
            carry = Some(g);
        }
        let mut g = carry.expect("at least one stage");
        leaky_relu_backward(&tape.stem.out, &mut g, slope);
        self.layout.stem.backward(p, &tape.stem.col, tape.stem.in_dims, &g, grads, false);
    }

    fn upsample(z: &Feature<T>, padded: [usize; 3], in_dims: [usize; 3]) -> Feature<T> {
        resize(z, padded).crop(in_dims)
    }

    fn channel_moments(zs: &[&Feature<T>]) -> ([f64; 3], [f64; 3], usize) {
        let count: usize = zs.iter().map(|z| z.voxels()).sum();
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for c in 0..3 {
            let s: f64 = zs.iter().map(|z| z.channel(c).iter().map(|v| v.f64()).sum::<f64>()).sum();
            mean[c] = s / count as f64;
            let ss: f64 = zs
                .iter()
                .map(|z| z.channel(c).iter().map(|v| (v.f64() - mean[c]).powi(2)).sum::<f64>())
                .sum();
            var[c] = ss / count as f64;
        }
        (mean, var, count)
    }

    fn normalize(z: &Feature<T>, mean: [f64; 3], inv_std: [f64; 3]) -> Feature<T> {
        let v = z.voxels();
        let mut out = z.clone();
        for c in 0..3 {
            let (m, s) = (T::lit(mean[c]), T::lit(inv_std[c]));
            for x in &mut out.data[c * v..(c + 1) * v] {
                *x = (*x - m) * s;
            }
        }
        out
    }

    /// Train-mode forward: batch statistics over all patches, running statistics updated.
    pub fn forward_train(&mut self, patches: &[ArrayView3<f32>]) -> Result<TrainForward<T>> {
        if patches.len() < 2 {
            return Err(Error::InvalidArgument("train-mode batches need at least 2 patches".into()));
        }
        for p in patches {
            let s = p.shape();
            self.check_size([s[0], s[1], s[2]])?;
        }
        let tapes: Vec<PatchTape<T>> = patches.par_iter().map(|p| self.forward_features(p.view())).collect();
        let zs: Vec<&Feature<T>> = tapes.iter().map(|t| &t.head.out).collect();
        let (mean, var, count) = Self::channel_moments(&zs);
        let eps = self.config.norm_eps;
        let inv_std = var.map(|v| 1.0 / (v + eps).sqrt());
        let normalized: Vec<Feature<T>> = zs.iter().map(|z| Self::normalize(z, mean, inv_std)).collect();
        let maps = normalized
            .iter()
            .zip(&tapes)
            .map(|(z, t)| Self::upsample(z, t.padded, t.in_dims))
            .collect();

        let m = self.config.bn_momentum;
        let unbias = count as f64 / (count as f64 - 1.0).max(1.0);
        for c in 0..3 {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c] * unbias;
        }
        Ok(TrainForward {
            maps,
            normalized,
            batch_mean: mean,
            batch_var: var,
            tapes,
        })
    }

    /// Parameter gradient given the gradient of the loss w.r.t. every output map.
    pub fn backward(&self, fwd: &TrainForward<T>, grad_maps: &[Feature<T>]) -> Vec<T> {
        assert_eq!(grad_maps.len(), fwd.tapes.len());
        // Gradient w.r.t. the normalized quarter-resolution maps.
        let dy: Vec<Feature<T>> = grad_maps
            .iter()
            .zip(&fwd.tapes)
            .map(|(g, t)| resize_backward(&g.pad_zero(t.padded), t.head.out.dims))
            .collect();
        let count: usize = dy.iter().map(|g| g.voxels()).sum();
        let inv_std = fwd.batch_var.map(|v| 1.0 / (v + self.config.norm_eps).sqrt());
        let mut mean_dy = [0.0; 3];
        let mut mean_dy_y = [0.0; 3];
        for c in 0..3 {
            for (g, y) in dy.iter().zip(&fwd.normalized) {
                for (a, b) in g.channel(c).iter().zip(y.channel(c)) {
                    mean_dy[c] += a.f64();
                    mean_dy_y[c] += a.f64() * b.f64();
                }
            }
            mean_dy[c] /= count as f64;
            mean_dy_y[c] /= count as f64;
        }
        let dz: Vec<Feature<T>> = dy
            .into_iter()
            .zip(&fwd.normalized)
            .map(|(mut g, y)| {
                let v = g.voxels();
                for c in 0..3 {
                    let (md, mdy, s) = (T::lit(mean_dy[c]), T::lit(mean_dy_y[c]), T::lit(inv_std[c]));
                    for (a, &b) in g.data[c * v..(c + 1) * v].iter_mut().zip(y.channel(c)) {
                        *a = s * (*a - md - b * mdy);
                    }
                }
                g
            })
            .collect();

        let per_patch: Vec<Vec<T>> = fwd
            .tapes
            .par_iter()
            .zip(dz.into_par_iter())
            .map(|(t, g)| {
                let mut grads = vec![T::zero(); self.layout.len];
                self.backward_features(t, g, &mut grads);
                grads
            })
            .collect();
        // Summed in patch order so the result does not depend on the thread count.
        let mut grads = vec![T::zero(); self.layout.len];
        for g in per_patch {
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        grads
    }

    /// Eval-mode forward of one patch using the running statistics.
    pub fn forward_eval(&self, patch: ArrayView3<f32>) -> Result<Feature<T>> {
        let s = patch.shape();
        self.check_size([s[0], s[1], s[2]])?;
        let tape = self.forward_features(patch);
        let inv_std = self.running_var.map(|v| 1.0 / (v + self.config.norm_eps).sqrt());
        let z = Self::normalize(&tape.head.out, self.running_mean, inv_std);
        Ok(Self::upsample(&z, tape.padded, tape.in_dims))
    }

    /// Sets the running statistics to the exact moments over `patches`.
    pub fn calibrate(&mut self, patches: &[ArrayView3<f32>]) -> Result<()> {
        if patches.is_empty() {
            return Err(Error::EmptyInput("calibration patches"));
        }
        for p in patches {
            let s = p.shape();
            self.check_size([s[0], s[1], s[2]])?;
        }
        let tapes: Vec<PatchTape<T>> = patches.par_iter().map(|p| self.forward_features(p.view())).collect();
        let zs: Vec<&Feature<T>> = tapes.iter().map(|t| &t.head.out).collect();
        let (mean, var, count) = Self::channel_moments(&zs);
        let unbias = count as f64 / (count as f64 - 1.0).max(1.0);
        self.running_mean = mean;
        self.running_var = var.map(|v| (v * unbias).max(f64::MIN_POSITIVE));
        Ok(())
    }
}

/// Converts a 3-channel feature to an `(3, H, W, D)` array.
pub fn feature_to_array<T: Real>(f: &Feature<T>) -> Array4<f32> {
    let [h, w, d] = f.dims;
    Array4::from_shape_vec((f.channels, h, w, d), f.data.iter().map(|v| v.f64() as f32).collect())
        .expect("feature length matches dims")
}

/// Sliding-window tiling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowConfig {
    pub window: [usize; 3],
    /// Fraction of the window shared by neighbouring tiles, in `[0, 1)`.
    pub overlap: f64,
    /// Triangular blending; when off, tiles are averaged with uniform weights.
    pub blend: bool,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self {
            window: [48, 48, 36],
            overlap: 0.5,
            blend: true,
        }
    }
}

impl SlidingWindowConfig {
    /// Plain tiling: no overlap beyond what is needed to reach the far edge, flat weights.
    pub fn unblended(window: [usize; 3]) -> Self {
        Self {
            window,
            overlap: 0.0,
            blend: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig("sliding window overlap must lie in [0, 1)".into()));
        }
        if self.window.contains(&0) {
            return Err(Error::InvalidConfig("sliding window must be nonempty".into()));
        }
        Ok(())
    }
}

/// Window start positions along an axis of length `n` (the last window ends at `n`).
pub fn window_starts(n: usize, window: usize, overlap: f64) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < n).collect();
    starts.push(n - window);
    starts
}

/// Separable triangular weight profile `min(i + 1, w - i)`.
pub fn triangular_weights(w: usize) -> Vec<f64> {
    (0..w).map(|i| (i + 1).min(w - i) as f64).collect()
}

/// Embeds a whole volume tile by tile and blends the overlapping predictions.
pub fn sliding_window_embed(
    model: &ApeModel<f32>,
    volume: &crate::volume::Volume,
    cfg: &SlidingWindowConfig,
) -> Result<crate::volume::EmbeddingMap> {
    cfg.validate()?;
    let shape = volume.shape();
    // Volumes smaller than the window get replicate-padded up to it and cropped back.
    let dims: [usize; 3] = std::array::from_fn(|a| shape[a].max(cfg.window[a]));
    let data: Array3<f32> = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
        volume.data[[i.min(shape[0] - 1), j.min(shape[1] - 1), k.min(shape[2] - 1)]] as f32
    });
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(dims[a], cfg.window[a], cfg.overlap));
    let profile: [Vec<f64>; 3] = std::array::from_fn(|a| {
        if cfg.blend {
            triangular_weights(cfg.window[a])
        } else {
            vec![1.0; cfg.window[a]]
        }
    });
    let mut tiles = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                tiles.push([i, j, k]);
            }
        }
    }
    let w = cfg.window;
    let preds: Vec<Feature<f32>> = tiles
        .par_iter()
        .map(|&[i, j, k]| {
            let view = data.slice(ndarray::s![i..i + w[0], j..j + w[1], k..k + w[2]]);
            model.forward_eval(view)
        })
        .collect::<Result<_>>()?;

    let n: usize = dims.iter().product();
    let mut acc = vec![0.0f64; 3 * n];
    let mut wsum = vec![0.0f64; n];
    for (&[i, j, k], pred) in tiles.iter().zip(&preds) {
        let v = pred.voxels();
        for a in 0..w[0] {
            for b in 0..w[1] {
                let wab = profile[0][a] * profile[1][b];
                for c in 0..w[2] {
                    let wt = wab * profile[2][c];
                    let dst = ((i + a) * dims[1] + j + b) * dims[2] + k + c;
                    let src = (a * w[1] + b) * w[2] + c;
                    wsum[dst] += wt;
                    for ch in 0..3 {
                        acc[ch * n + dst] += wt * pred.data[ch * v + src] as f64;
                    }
                }
            }
        }
    }
    let out = Array4::from_shape_fn((3, shape[0], shape[1], shape[2]), |(c, i, j, k)| {
        let idx = (i * dims[1] + j) * dims[2] + k;
        (acc[c * n + idx] / wsum[idx]) as f32
    });
    crate::volume::EmbeddingMap::new(
        out,
        volume.spacing.map(|s| s as f32),
        volume.origin.map(|o| o as f32),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            encoder_channels: vec![4, 6],
            decoder_channels: vec![4],
            ..ModelConfig::default()
        }
    }

    fn random_patch(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Array3<f32> {
        Array3::from_shape_fn((dims[0], dims[1], dims[2]), |_| rng.random_range(-1000.0..1000.0))
    }

    #[test]
    fn output_shape_matches_input() {
        let model = ApeModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dims in [[32, 32, 24], [16, 16, 16], [37, 21, 18]] {
            let p = random_patch(&mut rng, dims);
            let out = model.forward_eval(p.view()).unwrap();
            assert_eq!(out.channels, 3);
            assert_eq!(out.dims, dims);
        }
    }

    #[test]
    fn too_small_patch_is_rejected() {
        let model = ApeModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let p = Array3::<f32>::zeros((15, 32, 32));
        assert!(matches!(
            model.forward_eval(p.view()),
            Err(Error::PatchTooSmall { min: 16, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.decoder_channels.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.kernel_size = 2;
        assert!(c.validate().is_err());
        let single = ModelConfig {
            stem_channels: 4,
            encoder_channels: vec![4],
            decoder_channels: vec![],
            ..ModelConfig::default()
        };
        single.validate().unwrap();
        assert_eq!(single.min_patch_size(), 4);
    }

    #[test]
    fn train_mode_normalizes_per_channel() {
        let mut model = ApeModel::<f32>::new(ModelConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_patch(&mut rng, [32, 32, 24]);
        let b = random_patch(&mut rng, [24, 40, 20]);
        let out = model.forward_train(&[a.view(), b.view()]).unwrap();
        let all: Vec<&Feature<f32>> = out.normalized.iter().collect();
        let (mean, var, _) = ApeModel::<f32>::channel_moments(&all);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-3);
            assert!((var[c].sqrt() - 1.0).abs() < 1e-3);
        }
        assert!(model.forward_train(&[a.view()]).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let model = ApeModel::<f32>::new(ModelConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_patch(&mut rng, [32, 32, 24]);
        assert_eq!(model.forward_eval(p.view()).unwrap(), model.forward_eval(p.view()).unwrap());
    }

    /// Scalar objective sum(w * maps) for random fixed w, used for gradient checks.
    fn objective(model: &mut ApeModel<f64>, patches: &[Array3<f32>], w: &[Feature<f64>]) -> (f64, Vec<f64>) {
        let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
        let fwd = model.forward_train(&views).unwrap();
        let value = fwd
            .maps
            .iter()
            .zip(w)
            .map(|(m, w)| m.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let grads = model.backward(&fwd, w);
        (value, grads)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for cfg in [
            tiny(),
            ModelConfig {
                stem_channels: 4,
                encoder_channels: vec![4],
                decoder_channels: vec![],
                ..ModelConfig::default()
            },
        ] {
            let mut model = ApeModel::<f64>::new(cfg, 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let patches = vec![random_patch(&mut rng, [8, 12, 9]), random_patch(&mut rng, [10, 8, 8])];
            let w: Vec<Feature<f64>> = patches
                .iter()
                .map(|p| {
                    let s = p.shape();
                    let mut f = Feature::zeros(3, [s[0], s[1], s[2]]);
                    f.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                    f
                })
                .collect();
            let (_, grads) = objective(&mut model, &patches, &w);
            let h = 1e-3;
            let n = model.num_params();
            let mut worst: f64 = 0.0;
            for idx in (0..n).step_by((n / 40).max(1)) {
                let orig = model.params[idx];
                model.params[idx] = orig + h;
                let (fp, _) = objective(&mut model, &patches, &w);
                model.params[idx] = orig - h;
                let (fm, _) = objective(&mut model, &patches, &w);
                model.params[idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - grads[idx]).abs() / fd.abs().max(grads[idx].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-3, "worst relative error {worst}");
        }
    }

    #[test]
    fn calibrate_sets_exact_moments() {
        let mut model = ApeModel::<f64>::new(tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = [random_patch(&mut rng, [8, 8, 8]), random_patch(&mut rng, [12, 8, 8])];
        let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
        model.calibrate(&views).unwrap();
        let fwd = model.clone().forward_train(&views).unwrap();
        for c in 0..3 {
            assert!((model.running_mean[c] - fwd.batch_mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(64, 32, 0.5), vec![0, 16, 32]);
        assert_eq!(window_starts(70, 32, 0.5), vec![0, 16, 32, 38]);
        assert_eq!(window_starts(20, 32, 0.5), vec![0]);
        assert_eq!(window_starts(64, 32, 0.0), vec![0, 32]);
        assert_eq!(triangular_weights(4), vec![1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn one_window_volume_equals_forward() {
        let model = ApeModel::<f32>::new(ModelConfig::default(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SlidingWindowConfig::default();
        let [h, w, d] = cfg.window;
        let data = Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1000i16..1000));
        let vol = crate::volume::Volume::new(data.clone(), [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let map = sliding_window_embed(&model, &vol, &cfg).unwrap();
        let direct = model.forward_eval(data.mapv(|v| v as f32).view()).unwrap();
        assert_eq!(map.data, feature_to_array(&direct));
    }

    #[test]
    fn constant_volume_gives_constant_map() {
        let model = ApeModel::<f32>::new(ModelConfig::default(), 8).unwrap();
        let vol = crate::volume::Volume::new(Array3::from_elem((100, 90, 70), 40i16), [2.0; 3], [0.0; 3]).unwrap();
        let map = sliding_window_embed(&model, &vol, &SlidingWindowConfig::default()).unwrap();
        for c in 0..3 {
            let first = map.data[[c, 0, 0, 0]];
            assert!(map.data.index_axis(ndarray::Axis(0), c).iter().all(|&v| (v - first).abs() < 1e-5));
        }
    }
}

//! Convolutional feature extractor and 2D sinusoidal positional encoding.

use gmrw_tape::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::Frame;
use crate::error::{Error, Result};
use crate::grid::{grid_coordinates, CoordinateGrid};
use crate::params::ParamStore;
use crate::resample::resize_bilinear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the output tokens.
    pub feature_dim: usize,
    /// Total spatial downsampling of the network.
    pub downsample_factor: usize,
    /// Residual blocks after each stride-2 convolution.
    pub num_conv_blocks: usize,
    /// Channels after the stem; doubled at every downsampling stage.
    pub base_channels: usize,
    /// Phase range of the lowest encoding frequency across the frame.
    pub positional_encoding_scale: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            downsample_factor: 4,
            num_conv_blocks: 1,
            base_channels: 16,
            positional_encoding_scale: std::f32::consts::TAU,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(Error::Config(format!("feature_dim must be positive and even, got {}", self.feature_dim)));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two, got {}",
                self.downsample_factor
            )));
        }
        if self.num_conv_blocks == 0 || self.base_channels == 0 {
            return Err(Error::Config("num_conv_blocks and base_channels must be positive".into()));
        }
        if !(self.positional_encoding_scale.is_finite() && self.positional_encoding_scale > 0.0) {
            return Err(Error::Config("positional_encoding_scale must be positive".into()));
        }
        Ok(())
    }

    /// Upsampling applied before the network so cells land `stride` pixels apart.
    pub fn upsample_factor(&self, stride: usize) -> Result<usize> {
        if stride == 0 || self.downsample_factor % stride != 0 {
            return Err(Error::UnsupportedStride(stride));
        }
        Ok(self.downsample_factor / stride)
    }
}

/// Per-cell features of one frame, positional encoding included.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    /// `n × d`, cells in row-major order.
    pub features: Tensor<f32>,
    pub source_shape: (usize, usize),
    pub effective_stride: usize,
}

impl FeatureGrid {
    pub fn rows(&self) -> usize {
        self.source_shape.0 / self.effective_stride
    }

    pub fn cols(&self) -> usize {
        self.source_shape.1 / self.effective_stride
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn grid(&self) -> CoordinateGrid {
        grid_coordinates(self.source_shape.0, self.source_shape.1, self.effective_stride)
            .expect("feature grid geometry is validated on construction")
    }
}

/// Bilinearly upsamples a frame so a network with total downsampling
/// `downsample_factor` yields one cell every `stride` source pixels.
pub fn upsample_for_stride(frame: &Frame, stride: usize, downsample_factor: usize) -> Result<Frame> {
    if !matches!(stride, 1 | 2 | 4) || downsample_factor % stride != 0 {
        return Err(Error::UnsupportedStride(stride));
    }
    let k = downsample_factor / stride;
    if k == 1 {
        return Ok(frame.clone());
    }
    Ok(resize_bilinear(frame, frame.height() * k, frame.width() * k))
}

/// Sinusoidal encoding of the cell centres, `n × d`.
///
/// The first half of the channels encodes x, the second half y, as
/// interleaved sin/cos pairs over geometrically spaced frequencies.
pub fn positional_encoding<S: Scalar>(grid: &CoordinateGrid, dim: usize, scale: f32) -> Tensor<S> {
    let (h, w) = grid.frame_size();
    let half = dim / 2;
    let pairs = half.div_ceil(2).max(1);
    let mut out = Vec::with_capacity(grid.len() * dim);
    for c in grid.coords() {
        for (axis, extent) in [(0, w), (1, h)] {
            let p = (c[axis] as f64 + 0.5) / extent as f64 * scale as f64;
            for k in 0..half {
                let freq = 10000f64.powf(-((k / 2) as f64) / pairs as f64);
                let v = if k % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
                out.push(S::lit(v));
            }
        }
    }
    Tensor::new(&[grid.len(), dim], out)
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, k, k], std, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, pad: k / 2 }
    }

    fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, store: &ParamStore<S>, x: &Var<'t, S>) -> Var<'t, S> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    blocks: Vec<(Conv, Conv)>,
}

/// Residual CNN: stem, `log2(c)` stride-2 stages, 1×1 projection to `d`.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv,
    stages: Vec<Stage>,
    proj: Conv,
}

impl Backbone {
    pub fn new<S: Scalar>(config: &BackboneConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ch = config.base_channels;
        let stem = Conv::new(store, "backbone.stem", (3, ch, 3), 1, 1.0, rng);
        let mut stages = Vec::new();
        for s in 0..config.downsample_factor.trailing_zeros() as usize {
            let name = format!("backbone.stage{s}");
            let down = Conv::new(store, &format!("{name}.down"), (ch, ch * 2, 3), 2, 1.0, rng);
            ch *= 2;
            let blocks = (0..config.num_conv_blocks)
                .map(|b| {
                    let a = Conv::new(store, &format!("{name}.block{b}.conv1"), (ch, ch, 3), 1, 1.0, rng);
                    let c = Conv::new(store, &format!("{name}.block{b}.conv2"), (ch, ch, 3), 1, 0.5, rng);
                    (a, c)
                })
                .collect();
            stages.push(Stage { down, blocks });
        }
        let proj = Conv::new(store, "backbone.proj", (ch, config.feature_dim, 1), 1, 0.5, rng);
        Ok(Self { config: config.clone(), stem, stages, proj })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Tokens `[N, n, d]` with positional encoding for a batch of frames of
    /// one size, sampled at `stride` source pixels per cell.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        frames: &[&Frame],
        stride: usize,
    ) -> Result<Var<'t, S>> {
        let first = frames.first().ok_or_else(|| Error::EmptyInput("no frames to encode".into()))?;
        let (h, w) = (first.height(), first.width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Shape("frames in a batch must share one size".into()));
        }
        let grid = grid_coordinates(h, w, stride)?;
        self.config.upsample_factor(stride)?;
        let mut data = Vec::new();
        let (mut uh, mut uw) = (h, w);
        for f in frames {
            let up = upsample_for_stride(f, stride, self.config.downsample_factor)?;
            (uh, uw) = (up.height(), up.width());
            data.extend(up.to_chw().into_iter().map(|v| S::lit((2.0 * v - 1.0) as f64)));
        }
        let n = frames.len();
        let x = tape.constant(Tensor::new(&[n, 3, uh, uw], data));
        let mut x = self.stem.forward(tape, store, &x).gelu();
        for stage in &self.stages {
            x = stage.down.forward(tape, store, &x).gelu();
            for (a, b) in &stage.blocks {
                let r = b.forward(tape, store, &a.forward(tape, store, &x).gelu());
                x = x.add(&r).gelu();
            }
        }
        let x = self.proj.forward(tape, store, &x);
        let d = self.config.feature_dim;
        let x = x.reshape(&[n, d, grid.len()]).permute(&[0, 2, 1]);
        let pe = tape.constant(positional_encoding(&grid, d, self.config.positional_encoding_scale));
        Ok(x.add(&pe))
    }
}

/// Inference-only features of a single frame.
pub fn extract_features(
    frame: &Frame,
    backbone: &Backbone,
    params: &ParamStore<f32>,
    stride: usize,
) -> Result<FeatureGrid> {
    let tape = Tape::inference();
    let tokens = backbone.forward(&tape, params, &[frame], stride)?;
    let n = tokens.shape()[1];
    let features = tokens.value().clone().reshaped(&[n, backbone.config.feature_dim]);
    if !features.is_finite() {
        return Err(Error::NonFinite("backbone features".into()));
    }
    Ok(FeatureGrid { features, source_shape: (frame.height(), frame.width()), effective_stride: stride })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize) -> Frame {
        Frame::from_fn(h, w, |x, y| {
            let v = ((x * 7 + y * 13) % 11) as f32 / 10.0;
            [v, 1.0 - v, ((x ^ y) % 5) as f32 / 4.0]
        })
    }

    fn small() -> (Backbone, ParamStore<f32>) {
        let cfg = BackboneConfig { feature_dim: 16, base_channels: 4, ..Default::default() };
        let mut store = ParamStore::new();
        let bb = Backbone::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (bb, store)
    }

    #[test]
    fn grid_shape_follows_stride() {
        let (bb, store) = small();
        let f = textured(64, 64);
        let g = extract_features(&f, &bb, &store, 4).unwrap();
        assert_eq!(g.features.shape(), &[256, 16]);
        assert_eq!((g.rows(), g.cols()), (16, 16));
        let g = extract_features(&textured(16, 8), &bb, &store, 2).unwrap();
        assert_eq!(g.features.shape(), &[32, 16]);
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let (bb, store) = small();
        let f = textured(32, 32);
        let a = extract_features(&f, &bb, &store, 4).unwrap();
        let b = extract_features(&f.clone(), &bb, &store, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_frame_is_rejected() {
        let (bb, store) = small();
        assert!(extract_features(&textured(30, 32), &bb, &store, 4).is_err());
    }

    #[test]
    fn upsampling_matches_a_reference_resampler() {
        let f = textured(8, 8);
        assert_eq!(upsample_for_stride(&f, 4, 4).unwrap(), f);
        for (s, size) in [(2, 16), (1, 32)] {
            let up = upsample_for_stride(&f, s, 4).unwrap();
            assert_eq!((up.height(), up.width()), (size, size));
            let k = (4 / s) as f32;
            // independent evaluation of the pixel-centre mapping at an interior pixel
            let (u, v) = (size / 2 + 1, size / 2 - 1);
            let sx = (u as f32 + 0.5) / k - 0.5;
            let sy = (v as f32 + 0.5) / k - 0.5;
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..3 {
                let p = |x: usize, y: usize| f.pixel(x, y)[c];
                let want = (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x0 + 1, y0))
                    + fy * ((1.0 - fx) * p(x0, y0 + 1) + fx * p(x0 + 1, y0 + 1));
                assert!((up.pixel(u, v)[c] - want).abs() < 1e-6);
            }
        }
        assert!(matches!(upsample_for_stride(&f, 3, 4), Err(Error::UnsupportedStride(3))));
        assert!(upsample_for_stride(&f, 8, 4).is_err());
    }

    #[test]
    fn positional_encoding_is_injective() {
        for (h, w, s, d) in [(64, 64, 4, 64), (32, 48, 2, 16), (16, 16, 1, 6)] {
            let g = grid_coordinates(h, w, s).unwrap();
            let pe = positional_encoding::<f64>(&g, d, std::f32::consts::TAU);
            let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    let linf = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(linf > 0.0, "cells {i} and {j} collide");
                }
            }
        }
    }

    #[test]
    fn every_parameter_influences_the_output() {
        let cfg = BackboneConfig { feature_dim: 8, base_channels: 2, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let f = textured(8, 8);
        let tape = Tape::new();
        let probe = tape.constant(Tensor::from_fn(&[1, 4, 8], |i| ((i * 37 % 17) as f64 - 8.0) / 8.0));
        let out = bb.forward(&tape, &store, &[&f], 4).unwrap().mul(&probe).sum();
        let grads = tape.backward(&out);
        for i in 0..store.len() {
            let g = grads.param(i).unwrap();
            assert!(g.max_abs() > 0.0, "{} has zero gradient", store.name(i));
        }
    }
}

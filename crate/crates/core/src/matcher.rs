//! Transformer that correlates two feature grids, and the transition
//! matrices of the random walk built from its outputs.

use std::rc::Rc;

use gmrw_tape::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureGrid;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of the feed-forward block as a multiple of `d`.
    pub ffn_expansion: usize,
    pub use_shifted_windows: bool,
    /// Window side in cells; attention is global when it covers the grid.
    pub window_size: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { num_layers: 6, num_heads: 1, ffn_expansion: 4, use_shifted_windows: false, window_size: 8 }
    }
}

impl MatcherConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.ffn_expansion == 0 || self.window_size == 0 {
            return Err(Error::Config("matcher sizes must be positive".into()));
        }
        if dim % self.num_heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide feature_dim {dim}", self.num_heads)));
        }
        Ok(())
    }
}

/// Softmax temperature of the transition matrix for `d`-dimensional features.
pub fn temperature(dim: usize) -> f64 {
    (dim as f64).sqrt()
}

/// Matched features of the two frames, `n × d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFeatures {
    pub f_a: Tensor<f32>,
    pub f_b: Tensor<f32>,
    pub grid_shape: (usize, usize),
}

/// Row-stochastic matrix of cell-to-cell match probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    /// `n_source × n_target`.
    pub probs: Tensor<f32>,
    pub source_grid: (usize, usize),
    pub target_grid: (usize, usize),
}

impl TransitionMatrix {
    pub fn new(probs: Tensor<f32>, source_grid: (usize, usize), target_grid: (usize, usize)) -> Result<Self> {
        let want = [source_grid.0 * source_grid.1, target_grid.0 * target_grid.1];
        if probs.shape() != want {
            return Err(Error::Shape(format!("transition {:?} for grids {want:?}", probs.shape())));
        }
        Ok(Self { probs, source_grid, target_grid })
    }

    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let m = self.cols();
        &self.probs.data()[i * m..(i + 1) * m]
    }

    /// Largest deviation of a row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.rows())
            .map(|i| (self.row(i).iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `softmax(f_a · f_bᵀ / τ)` with `τ = √d`, on tape values of any batch shape.
pub fn transition_probs<'t, S: Scalar>(f_a: &Var<'t, S>, f_b: &Var<'t, S>) -> Var<'t, S> {
    let d = *f_a.shape().last().expect("features have a channel axis");
    f_a.matmul_t(f_b, false, true).softmax(S::lit(1.0 / temperature(d)), None)
}

pub fn transition_matrix(corr: &CorrelationFeatures) -> Result<TransitionMatrix> {
    if !corr.f_a.is_finite() || !corr.f_b.is_finite() {
        return Err(Error::NonFinite("correlation features".into()));
    }
    if corr.f_a.shape() != corr.f_b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", corr.f_a.shape(), corr.f_b.shape())));
    }
    let tape = Tape::inference();
    let p = transition_probs(&tape.constant(corr.f_a.clone()), &tape.constant(corr.f_b.clone()));
    TransitionMatrix::new(p.value().clone(), corr.grid_shape, corr.grid_shape)
}

/// Two-step walk `a` then `b`.
pub fn chain(a: &TransitionMatrix, b: &TransitionMatrix) -> Result<TransitionMatrix> {
    if a.target_grid != b.source_grid {
        return Err(Error::Shape(format!("cannot chain {:?} into {:?}", a.target_grid, b.source_grid)));
    }
    let tape = Tape::inference();
    let p = tape.constant(a.probs.clone()).matmul(&tape.constant(b.probs.clone()));
    TransitionMatrix::new(p.value().clone(), a.source_grid, b.target_grid)
}

#[derive(Clone, Debug)]
struct Attention {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    norm: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn_in: (usize, usize),
    ffn_out: (usize, usize),
    ffn_norm: (usize, usize),
}

/// Token order that makes each attention window contiguous, the inverse
/// order, and the additive mask separating wrapped-around regions.
struct WindowPlan<S> {
    order: Rc<Vec<usize>>,
    inverse: Rc<Vec<usize>>,
    windows: usize,
    size: usize,
    mask: Option<Tensor<S>>,
}

fn window_plan<S: Scalar>(rows: usize, cols: usize, size: usize, shift: usize, heads: usize) -> Result<WindowPlan<S>> {
    if rows % size != 0 || cols % size != 0 {
        return Err(Error::Dimension(format!("{rows}x{cols} grid is not divisible into {size}x{size} windows")));
    }
    let (wr, wc) = (rows / size, cols / size);
    let mut order = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows * cols);
    for r0 in 0..wr {
        for c0 in 0..wc {
            for i in 0..size {
                for j in 0..size {
                    let (rr, cc) = (r0 * size + i + shift, c0 * size + j + shift);
                    order.push((rr % rows) * cols + cc % cols);
                    labels.push((rr >= rows) as u8 * 2 + (cc >= cols) as u8);
                }
            }
        }
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inverse[tok] = pos;
    }
    let area = size * size;
    let windows = wr * wc;
    let mask = (shift > 0).then(|| {
        let mut m = Vec::with_capacity(windows * heads * area * area);
        for w in 0..windows {
            let l = &labels[w * area..(w + 1) * area];
            for _ in 0..heads {
                for a in l {
                    m.extend(l.iter().map(|b| if a == b { S::zero() } else { S::lit(-1e9) }));
                }
            }
        }
        Tensor::new(&[windows, heads, area, area], m)
    });
    Ok(WindowPlan { order: Rc::new(order), inverse: Rc::new(inverse), windows, size: area, mask })
}

/// Stacked self-attention, cross-attention and feed-forward layers shared
/// by both streams.
#[derive(Clone, Debug)]
pub struct Matcher {
    config: MatcherConfig,
    dim: usize,
    layers: Vec<Layer>,
}

impl Matcher {
    pub fn new<S: Scalar>(config: &MatcherConfig, dim: usize, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate(dim)?;
        let std = (1.0 / dim as f64).sqrt();
        let hidden = dim * config.ffn_expansion;
        let norm = |store: &mut ParamStore<S>, name: String| {
            let g = store.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
            let b = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
            (g, b)
        };
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let attn = |store: &mut ParamStore<S>, kind: &str, rng: &mut _| {
                let name = format!("matcher.layer{l}.{kind}");
                Attention {
                    q: store.add_normal(format!("{name}.q"), &[dim, dim], std, rng),
                    k: store.add_normal(format!("{name}.k"), &[dim, dim], std, rng),
                    v: store.add_normal(format!("{name}.v"), &[dim, dim], std, rng),
                    o: store.add_normal(format!("{name}.o"), &[dim, dim], std, rng),
                    norm: norm(store, format!("{name}.norm")),
                }
            };
            let self_attn = attn(store, "self_attn", rng);
            let cross_attn = attn(store, "cross_attn", rng);
            let name = format!("matcher.layer{l}.ffn");
            let ffn_in = (
                store.add_normal(format!("{name}.in.weight"), &[dim, hidden], std, rng),
                store.add(format!("{name}.in.bias"), Tensor::zeros(&[hidden])),
            );
            let ffn_out = (
                store.add_normal(format!("{name}.out.weight"), &[hidden, dim], (1.0 / hidden as f64).sqrt(), rng),
                store.add(format!("{name}.out.bias"), Tensor::zeros(&[dim])),
            );
            let ffn_norm = norm(store, format!("{name}.norm"));
            layers.push(Layer { self_attn, cross_attn, ffn_in, ffn_out, ffn_norm });
        }
        Ok(Self { config: config.clone(), dim, layers })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    /// Correlates `[B, n, d]` token batches `a` and `b` laid out on a
    /// `rows × cols` grid; returns the updated `(a, b)`.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        a: &Var<'t, S>,
        b: &Var<'t, S>,
        (rows, cols): (usize, usize),
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        if a.shape() != b.shape() || a.shape().len() != 3 || a.shape()[2] != self.dim || a.shape()[1] != rows * cols {
            return Err(Error::Shape(format!(
                "matcher inputs {:?} and {:?} on a {rows}x{cols} grid with d={}",
                a.shape(),
                b.shape(),
                self.dim
            )));
        }
        let batch = a.shape()[0];
        let size = self.config.window_size;
        let windowed = self.config.use_shifted_windows && (size < rows || size < cols);
        let plans = if windowed {
            let heads = self.config.num_heads;
            Some([window_plan::<S>(rows, cols, size, 0, heads)?, window_plan::<S>(rows, cols, size, size / 2, heads)?])
        } else {
            None
        };
        let mut s = Var::concat(&[a.clone(), b.clone()]);
        for (l, layer) in self.layers.iter().enumerate() {
            let plan = plans.as_ref().map(|p| &p[l % 2]);
            let y = self.attention(tape, store, &layer.self_attn, &s, &s, plan);
            s = s.add(&y);
            let other = Var::concat(&[s.narrow(batch, batch), s.narrow(0, batch)]);
            let y = self.attention(tape, store, &layer.cross_attn, &s, &other, plan);
            s = s.add(&y);
            let h = s.matmul(&store.var(tape, layer.ffn_in.0)).add(&store.var(tape, layer.ffn_in.1)).gelu();
            let y = h.matmul(&store.var(tape, layer.ffn_out.0)).add(&store.var(tape, layer.ffn_out.1));
            s = s.add(&norm(tape, store, layer.ffn_norm, &y));
        }
        Ok((s.narrow(0, batch), s.narrow(batch, batch)))
    }

    /// Normalised attention output with queries from `x` and keys/values from `src`.
    fn attention<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
        p: &Attention,
        x: &Var<'t, S>,
        src: &Var<'t, S>,
        plan: Option<&WindowPlan<S>>,
    ) -> Var<'t, S> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], self.dim);
        let heads = self.config.num_heads;
        let dh = d / heads;
        let mut q = x.matmul(&store.var(tape, p.q));
        let mut k = src.matmul(&store.var(tape, p.k));
        let mut v = src.matmul(&store.var(tape, p.v));
        let (groups, len) = match plan {
            Some(w) => {
                let part = |t: &Var<'t, S>| t.gather_rows(Rc::clone(&w.order)).reshape(&[b * w.windows, w.size, d]);
                (q, k, v) = (part(&q), part(&k), part(&v));
                (b * w.windows, w.size)
            }
            None => (b, n),
        };
        let split = |t: &Var<'t, S>| {
            if heads == 1 {
                t.clone()
            } else {
                t.reshape(&[groups, len, heads, dh]).permute(&[0, 2, 1, 3])
            }
        };
        let (q, k, v) = (split(&q), split(&k), split(&v));
        let scores = q.matmul_t(&k, false, true);
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let probs = match plan.and_then(|w| w.mask.as_ref().map(|m| (w, m))) {
            Some((w, mask)) => scores
                .reshape(&[b, w.windows, heads, len, len])
                .softmax(scale, Some(mask))
                .reshape(&[groups, heads, len, len]),
            None => scores.softmax(scale, None),
        };
        let mut out = probs.matmul(&v);
        if heads > 1 {
            out = out.permute(&[0, 2, 1, 3]);
        }
        let mut out = out.reshape(&[b, n, d]);
        if let Some(w) = plan {
            out = out.gather_rows(Rc::clone(&w.inverse));
        }
        let out = out.matmul(&store.var(tape, p.o));
        norm(tape, store, p.norm, &out)
    }
}

fn norm<'t, S: Scalar>(tape: &'t Tape<S>, store: &ParamStore<S>, (g, b): (usize, usize), x: &Var<'t, S>) -> Var<'t, S> {
    x.layer_norm(&store.var(tape, g), &store.var(tape, b), S::lit(LN_EPS))
}

/// Inference-only correlation of two feature grids.
pub fn correlate(
    feat_a: &FeatureGrid,
    feat_b: &FeatureGrid,
    matcher: &Matcher,
    params: &ParamStore<f32>,
) -> Result<CorrelationFeatures> {
    if feat_a.features.shape() != feat_b.features.shape() || (feat_a.rows(), feat_a.cols()) != (feat_b.rows(), feat_b.cols()) {
        return Err(Error::Shape("feature grids differ in shape".into()));
    }
    let (n, d) = (feat_a.features.shape()[0], feat_a.dim());
    let tape = Tape::inference();
    let a = tape.constant(feat_a.features.clone().reshaped(&[1, n, d]));
    let b = tape.constant(feat_b.features.clone().reshaped(&[1, n, d]));
    let (fa, fb) = matcher.forward(&tape, params, &a, &b, (feat_a.rows(), feat_a.cols()))?;
    Ok(CorrelationFeatures {
        f_a: fa.value().clone().reshaped(&[n, d]),
        f_b: fb.value().clone().reshaped(&[n, d]),
        grid_shape: (feat_a.rows(), feat_a.cols()),
    })
}

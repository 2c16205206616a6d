use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{inverse_axes, Tensor};

pub type NodeId = usize;

/// Value plus the node that produced it (if it needs a gradient).
type Input<S> = (Option<NodeId>, Rc<Tensor<S>>);

enum Op<S> {
    Leaf {
        param: Option<usize>,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
        b_shape: Vec<usize>,
        negate_b: bool,
    },
    Mul {
        a: Input<S>,
        b: Input<S>,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Gelu {
        a: Input<S>,
    },
    MatMul {
        a: Input<S>,
        b: Input<S>,
        ta: bool,
        tb: bool,
    },
    Softmax {
        a: NodeId,
        y: Rc<Tensor<S>>,
        scale: S,
    },
    LayerNorm {
        a: Option<NodeId>,
        gamma: Input<S>,
        beta: Option<NodeId>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Conv2d {
        x: Option<NodeId>,
        w: Input<S>,
        bias: Option<NodeId>,
        cols: Vec<S>,
        geom: kernels::ConvGeom,
    },
    Reshape {
        a: NodeId,
        in_shape: Vec<usize>,
    },
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, Vec<usize>)>,
    },
    Narrow {
        a: NodeId,
        start: usize,
        in_shape: Vec<usize>,
    },
    Gather {
        a: NodeId,
        index: Rc<Vec<usize>>,
        in_shape: Vec<usize>,
    },
    Sum {
        a: NodeId,
        in_shape: Vec<usize>,
        scale: S,
    },
    SoftCrossEntropy {
        p: Input<S>,
        label: Rc<Tensor<S>>,
        row_mask: Rc<Vec<bool>>,
        eps: S,
        rows: usize,
    },
    Smoothness {
        f: Input<S>,
        wx: Rc<Tensor<S>>,
        wy: Rc<Tensor<S>>,
    },
    Huber {
        p: Input<S>,
        target: Rc<Tensor<S>>,
        delta: S,
    },
}

/// Records differentiable operations for a single forward/backward pass.
///
/// A tape built with [`Tape::inference`] records nothing: every value is a
/// constant and intermediate buffers are freed as soon as their `Var` drops.
pub struct Tape<S> {
    nodes: RefCell<Vec<Op<S>>>,
    recording: bool,
}

/// A tensor value living on a tape.
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    value: Rc<Tensor<S>>,
    id: Option<NodeId>,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        Self { tape: self.tape, value: Rc::clone(&self.value), id: self.id }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    nodes: Vec<Option<Tensor<S>>>,
    params: BTreeMap<usize, NodeId>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for the parameter registered under `index`, if it was reached.
    pub fn param(&self, index: usize) -> Option<&Tensor<S>> {
        self.params.get(&index).and_then(|&id| self.nodes[id].as_ref())
    }

    /// Gradient with respect to any recorded variable.
    pub fn wrt(&self, var: &Var<'_, S>) -> Option<&Tensor<S>> {
        var.id.and_then(|id| self.nodes.get(id)).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<S>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    fn wrap(&self, value: Tensor<S>, id: Option<NodeId>) -> Var<'_, S> {
        Var { tape: self, value: Rc::new(value), id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.wrap(value, None)
    }

    /// A trainable leaf, reported in [`Gradients::param`] under `index`.
    pub fn param(&self, index: usize, value: Rc<Tensor<S>>) -> Var<'_, S> {
        let id = self.recording.then(|| self.push(Op::Leaf { param: Some(index) }));
        Var { tape: self, value, id }
    }

    /// A leaf that requires a gradient but is not a registered parameter.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.recording.then(|| self.push(Op::Leaf { param: None }));
        self.wrap(value, id)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: &Var<'_, S>) -> Gradients<S> {
        assert_eq!(output.value.numel(), 1, "backward from a non-scalar output");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        let mut params = BTreeMap::new();
        for (id, op) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(k) } = op {
                params.insert(*k, id);
            }
        }
        let Some(root) = output.id else {
            return Gradients { nodes: grads, params };
        };
        grads[root] = Some(Tensor::full(output.value.shape(), S::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes[id], &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { nodes: grads, params }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: Option<NodeId>, g: Tensor<S>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<S: Scalar>(op: &Op<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
    match op {
        Op::Leaf { .. } => {}
        Op::Add { a, b, b_shape, negate_b } => {
            accumulate(grads, *a, g.clone());
            if b.is_some() {
                let mut gb = kernels::sum_leading(g, b_shape);
                if *negate_b {
                    gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            if a.0.is_some() {
                accumulate(grads, a.0, kernels::mul_suffix(g, &b.1));
            }
            if b.0.is_some() {
                let prod = kernels::zip_same(g, &a.1, |x, y| x * y);
                accumulate(grads, b.0, kernels::sum_leading(&prod, b.1.shape()));
            }
        }
        Op::Scale { a, c } => accumulate(grads, Some(*a), g.map(|v| v * *c)),
        Op::Gelu { a } => accumulate(grads, a.0, kernels::zip_same(g, &a.1, |gv, x| gv * kernels::gelu_grad(x))),
        Op::MatMul { a, b, ta, tb } => {
            let (ga, gb) = kernels::matmul_backward(g, &a.1, &b.1, *ta, *tb, a.0.is_some(), b.0.is_some());
            if let Some(ga) = ga {
                accumulate(grads, a.0, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, b.0, gb);
            }
        }
        Op::Softmax { a, y, scale } => accumulate(grads, Some(*a), kernels::softmax_backward(g, y, *scale)),
        Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
            let c = gamma.1.numel();
            if beta.is_some() {
                accumulate(grads, *beta, kernels::sum_leading(g, &[c]));
            }
            if gamma.0.is_some() {
                let mut gg = vec![S::zero(); c];
                for (row_g, row_x) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += row_g[j] * row_x[j];
                    }
                }
                accumulate(grads, gamma.0, Tensor::new(&[c], gg));
            }
            if a.is_some() {
                accumulate(grads, *a, kernels::layer_norm_backward(g, gamma.1.data(), xhat, rstd));
            }
        }
        Op::Conv2d { x, w, bias, cols, geom } => {
            let (gx, gw, gb) = kernels::conv2d_backward(g, &w.1, cols, geom, x.is_some());
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            accumulate(grads, w.0, gw);
            if bias.is_some() {
                accumulate(grads, *bias, gb);
            }
        }
        Op::Reshape { a, in_shape } => accumulate(grads, Some(*a), g.clone().reshaped(in_shape)),
        Op::Permute { a, axes } => accumulate(grads, Some(*a), g.permuted(&inverse_axes(axes))),
        Op::Concat { parts } => {
            let mut offset = 0;
            for (id, shape) in parts {
                let n: usize = shape.iter().product();
                if id.is_some() {
                    accumulate(grads, *id, Tensor::new(shape, g.data()[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::Narrow { a, start, in_shape } => {
            let inner: usize = in_shape[1..].iter().product();
            let mut full = Tensor::zeros(in_shape);
            full.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
            accumulate(grads, Some(*a), full);
        }
        Op::Gather { a, index, in_shape } => {
            accumulate(grads, Some(*a), kernels::scatter_rows(g, index, in_shape));
        }
        Op::Sum { a, in_shape, scale } => {
            accumulate(grads, Some(*a), Tensor::full(in_shape, g.item() * *scale));
        }
        Op::SoftCrossEntropy { p, label, row_mask, eps, rows } => {
            let scale = -g.item() / S::lit(*rows as f64);
            let m = *p.1.shape().last().unwrap();
            let mut gp = Tensor::zeros(p.1.shape());
            let pv = p.1.data();
            let lv = label.data();
            for (r, &valid) in row_mask.iter().enumerate() {
                if !valid {
                    continue;
                }
                let base = r * m;
                let out = &mut gp.data_mut()[base..base + m];
                for j in 0..m {
                    let l = lv[base + j];
                    if l != S::zero() {
                        out[j] = scale * l / (pv[base + j] + *eps);
                    }
                }
            }
            accumulate(grads, p.0, gp);
        }
        Op::Smoothness { f, wx, wy } => {
            accumulate(grads, f.0, kernels::smoothness_backward(g.item(), &f.1, wx, wy));
        }
        Op::Huber { p, target, delta } => {
            accumulate(grads, p.0, kernels::huber_backward(g.item(), &p.1, target, *delta));
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, S> {
        Var { tape: self.tape, value: Rc::clone(&self.value), id: None }
    }

    fn input(&self) -> Input<S> {
        (self.id, Rc::clone(&self.value))
    }

    fn derive(&self, value: Tensor<S>, op: impl FnOnce() -> Op<S>, any_grad: bool) -> Var<'t, S> {
        let id = (self.tape.recording && any_grad).then(|| self.tape.push(op()));
        self.tape.wrap(value, id)
    }

    fn add_impl(&self, other: &Var<'t, S>, negate_b: bool) -> Var<'t, S> {
        let value = kernels::add_suffix(&self.value, &other.value, negate_b);
        let (a, b) = (self.id, other.id);
        let b_shape = other.shape().to_vec();
        self.derive(value, || Op::Add { a, b, b_shape, negate_b }, a.is_some() || b.is_some())
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: &Var<'t, S>) -> Var<'t, S> {
        self.add_impl(other, false)
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Var<'t, S> {
        self.add_impl(other, true)
    }

    /// Elementwise product; `other` may broadcast over leading axes.
    pub fn mul(&self, other: &Var<'t, S>) -> Var<'t, S> {
        let value = kernels::mul_suffix(&self.value, &other.value);
        let grad = self.id.is_some() || other.id.is_some();
        self.derive(value, || Op::Mul { a: self.input(), b: other.input() }, grad)
    }

    pub fn scale(&self, c: S) -> Var<'t, S> {
        let value = self.value.map(|v| v * c);
        let a = self.id;
        self.derive(value, || Op::Scale { a: a.unwrap(), c }, a.is_some())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, S> {
        let value = self.value.map(kernels::gelu);
        self.derive(value, || Op::Gelu { a: self.input() }, self.id.is_some())
    }

    /// Batched `op(self) · op(other)`.
    ///
    /// `self` is `[.., M, K]`; `other` is either `[.., K, N]` with the same
    /// leading axes or a shared 2-D `[K, N]`. `ta`/`tb` transpose the last two
    /// axes of the respective operand.
    pub fn matmul_t(&self, other: &Var<'t, S>, ta: bool, tb: bool) -> Var<'t, S> {
        let value = kernels::matmul(&self.value, &other.value, ta, tb);
        let grad = self.id.is_some() || other.id.is_some();
        self.derive(value, || Op::MatMul { a: self.input(), b: other.input(), ta, tb }, grad)
    }

    pub fn matmul(&self, other: &Var<'t, S>) -> Var<'t, S> {
        self.matmul_t(other, false, false)
    }

    /// Softmax over the last axis of `scale * self + mask`.
    ///
    /// The additive mask broadcasts over leading axes.
    pub fn softmax(&self, scale: S, mask: Option<&Tensor<S>>) -> Var<'t, S> {
        let y = Rc::new(kernels::softmax(&self.value, scale, mask));
        let id = (self.tape.recording && self.id.is_some())
            .then(|| self.tape.push(Op::Softmax { a: self.id.unwrap(), y: Rc::clone(&y), scale }));
        Var { tape: self.tape, value: y, id }
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, S>, beta: &Var<'t, S>, eps: S) -> Var<'t, S> {
        let c = *self.shape().last().expect("layer_norm on a scalar");
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let (value, xhat, rstd) = kernels::layer_norm(&self.value, gamma.value.data(), beta.value.data(), eps);
        let grad = self.id.is_some() || gamma.id.is_some() || beta.id.is_some();
        self.derive(
            value,
            || Op::LayerNorm { a: self.id, gamma: gamma.input(), beta: beta.id, xhat, rstd },
            grad,
        )
    }

    /// 2-D convolution of an NCHW input with a `[Co, Ci, k, k]` kernel.
    pub fn conv2d(&self, weight: &Var<'t, S>, bias: Option<&Var<'t, S>>, stride: usize, pad: usize) -> Var<'t, S> {
        let geom = kernels::ConvGeom::new(self.shape(), weight.shape(), stride, pad);
        let (value, cols) = kernels::conv2d(&self.value, &weight.value, bias.map(|b| b.value.data()), &geom);
        let bias_id = bias.and_then(|b| b.id);
        let grad = self.id.is_some() || weight.id.is_some() || bias_id.is_some();
        self.derive(
            value,
            || Op::Conv2d { x: self.id, w: weight.input(), bias: bias_id, cols, geom },
            grad,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, S> {
        let in_shape = self.shape().to_vec();
        let value = (*self.value).clone().reshaped(shape);
        let a = self.id;
        self.derive(value, || Op::Reshape { a: a.unwrap(), in_shape }, a.is_some())
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t, S> {
        let value = self.value.permuted(axes);
        let a = self.id;
        self.derive(value, || Op::Permute { a: a.unwrap(), axes: axes.to_vec() }, a.is_some())
    }

    /// Concatenate along axis 0.
    pub fn concat(parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(&p.shape()[1..], tail, "concat shape mismatch");
            rows += p.shape()[0];
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let grad = parts.iter().any(|p| p.id.is_some());
        parts[0].derive(
            Tensor::new(&shape, data),
            || Op::Concat { parts: parts.iter().map(|p| (p.id, p.shape().to_vec())).collect() },
            grad,
        )
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn narrow(&self, start: usize, len: usize) -> Var<'t, S> {
        let shape = self.shape();
        assert!(start + len <= shape[0]);
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let value = Tensor::new(&out_shape, self.value.data()[start * inner..(start + len) * inner].to_vec());
        let a = self.id;
        let in_shape = shape.to_vec();
        self.derive(value, || Op::Narrow { a: a.unwrap(), start, in_shape }, a.is_some())
    }

    /// Select rows along axis 1 of a `[B, N, D]` tensor.
    pub fn gather_rows(&self, index: Rc<Vec<usize>>) -> Var<'t, S> {
        let value = kernels::gather_rows(&self.value, &index);
        let a = self.id;
        let in_shape = self.shape().to_vec();
        self.derive(value, || Op::Gather { a: a.unwrap(), index, in_shape }, a.is_some())
    }

    pub fn sum(&self) -> Var<'t, S> {
        self.reduce(S::one())
    }

    pub fn mean(&self) -> Var<'t, S> {
        self.reduce(S::one() / S::lit(self.value.numel() as f64))
    }

    fn reduce(&self, scale: S) -> Var<'t, S> {
        let total = self.value.data().iter().fold(S::zero(), |acc, &v| acc + v) * scale;
        let a = self.id;
        let in_shape = self.shape().to_vec();
        self.derive(Tensor::scalar(total), || Op::Sum { a: a.unwrap(), in_shape, scale }, a.is_some())
    }

    /// Mean over unmasked rows of `-Σ_j label_ij · ln(self_ij + eps)`.
    ///
    /// `self` and `label` share shape `[.., n, m]`; `row_mask` has one entry
    /// per row. Panics if no row is unmasked.
    pub fn soft_cross_entropy(&self, label: Rc<Tensor<S>>, row_mask: Rc<Vec<bool>>, eps: S) -> Var<'t, S> {
        assert_eq!(self.shape(), label.shape());
        let m = *self.shape().last().unwrap();
        assert_eq!(row_mask.len() * m, self.value.numel());
        let rows = row_mask.iter().filter(|&&v| v).count();
        assert!(rows > 0, "soft_cross_entropy with every row masked");
        let mut total = S::zero();
        let pv = self.value.data();
        let lv = label.data();
        for (r, &valid) in row_mask.iter().enumerate() {
            if !valid {
                continue;
            }
            for j in r * m..(r + 1) * m {
                let l = lv[j];
                if l != S::zero() {
                    total -= l * (pv[j] + eps).ln();
                }
            }
        }
        let value = Tensor::scalar(total / S::lit(rows as f64));
        self.derive(value, || Op::SoftCrossEntropy { p: self.input(), label, row_mask, eps, rows }, self.id.is_some())
    }

    /// Weighted second-difference penalty of a `[B, h, w, k]` field.
    ///
    /// Mean over batch and interior cells of `wx·Σ|∂²f/∂x²|` plus the same
    /// for `y`; `wx`/`wy` are `[B, h, w]`. Requires `h, w ≥ 3`.
    pub fn second_order_smoothness(&self, wx: Rc<Tensor<S>>, wy: Rc<Tensor<S>>) -> Var<'t, S> {
        let value = Tensor::scalar(kernels::smoothness(&self.value, &wx, &wy));
        self.derive(value, || Op::Smoothness { f: self.input(), wx, wy }, self.id.is_some())
    }

    /// Mean Huber penalty on the Euclidean norm of per-cell error vectors
    /// (last axis).
    pub fn huber(&self, target: Rc<Tensor<S>>, delta: S) -> Var<'t, S> {
        assert_eq!(self.shape(), target.shape());
        let value = Tensor::scalar(kernels::huber(&self.value, &target, delta));
        self.derive(value, || Op::Huber { p: self.input(), target, delta }, self.id.is_some())
    }
}

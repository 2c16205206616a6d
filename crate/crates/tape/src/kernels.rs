//! Forward and backward kernels behind the tape operations.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

fn suffix_split(a: &[usize], b: &[usize]) -> usize {
    assert!(
        b.len() <= a.len() && a[a.len() - b.len()..] == *b,
        "shape {b:?} does not broadcast onto {a:?}"
    );
    b.iter().product()
}

pub(crate) fn add_suffix<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, negate_b: bool) -> Tensor<S> {
    let inner = suffix_split(a.shape(), b.shape());
    let bv = b.data();
    let mut out = a.clone();
    for chunk in out.data_mut().chunks_mut(inner.max(1)) {
        if negate_b {
            chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x -= y);
        } else {
            chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x += y);
        }
    }
    out
}

pub(crate) fn mul_suffix<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let inner = suffix_split(a.shape(), b.shape());
    let bv = b.data();
    let mut out = a.clone();
    for chunk in out.data_mut().chunks_mut(inner.max(1)) {
        chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x *= y);
    }
    out
}

/// Reduce `g` onto `shape`, which must be a suffix of `g`'s shape.
pub(crate) fn sum_leading<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let inner = suffix_split(g.shape(), shape);
    let mut out = vec![S::zero(); inner];
    for chunk in g.data().chunks(inner.max(1)) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    Tensor::new(shape, out)
}

pub(crate) fn zip_same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}

struct MatShape {
    batch: usize,
    rows: usize,
    cols: usize,
}

fn mat_shape(shape: &[usize]) -> MatShape {
    assert!(shape.len() >= 2, "matmul operand must have rank >= 2, got {shape:?}");
    let r = shape.len();
    MatShape { batch: shape[..r - 2].iter().product(), rows: shape[r - 2], cols: shape[r - 1] }
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Tensor<S> {
    let sa = mat_shape(a.shape());
    let sb = mat_shape(b.shape());
    let shared_b = b.rank() == 2;
    if !shared_b {
        assert_eq!(a.shape()[..a.rank() - 2], b.shape()[..b.rank() - 2], "matmul batch mismatch");
    }
    let (m, k) = if ta { (sa.cols, sa.rows) } else { (sa.rows, sa.cols) };
    let (k2, n) = if tb { (sb.cols, sb.rows) } else { (sb.rows, sb.cols) };
    assert_eq!(k, k2, "matmul inner mismatch {:?} x {:?}", a.shape(), b.shape());
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend_from_slice(&[m, n]);
    let mut out = vec![S::zero(); sa.batch * m * n];
    if shared_b && !ta {
        gemm(
            MatRef::new(a.data(), sa.batch * sa.rows, sa.cols, false),
            MatRef::new(b.data(), sb.rows, sb.cols, tb),
            S::zero(),
            &mut out,
        );
    } else {
        let a_len = sa.rows * sa.cols;
        let b_len = sb.rows * sb.cols;
        for i in 0..sa.batch {
            let bo = if shared_b { 0 } else { i * b_len };
            gemm(
                MatRef::new(&a.data()[i * a_len..(i + 1) * a_len], sa.rows, sa.cols, ta),
                MatRef::new(&b.data()[bo..bo + b_len], sb.rows, sb.cols, tb),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_backward<S: Scalar>(
    g: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    ta: bool,
    tb: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let sa = mat_shape(a.shape());
    let sb = mat_shape(b.shape());
    let sg = mat_shape(g.shape());
    let shared_b = b.rank() == 2;
    let a_len = sa.rows * sa.cols;
    let b_len = sb.rows * sb.cols;
    let g_len = sg.rows * sg.cols;

    let ga = need_a.then(|| {
        let mut out = vec![S::zero(); a.numel()];
        for i in 0..sa.batch {
            let gm = MatRef::new(&g.data()[i * g_len..(i + 1) * g_len], sg.rows, sg.cols, false);
            let bo = if shared_b { 0 } else { i * b_len };
            let bs = &b.data()[bo..bo + b_len];
            let dst = &mut out[i * a_len..(i + 1) * a_len];
            if ta {
                // dA = op(B) · Gᵀ
                gemm(MatRef::new(bs, sb.rows, sb.cols, tb), MatRef { trans: true, ..gm }, S::zero(), dst);
            } else {
                // dA = G · op(B)ᵀ
                gemm(gm, MatRef::new(bs, sb.rows, sb.cols, !tb), S::zero(), dst);
            }
        }
        Tensor::new(a.shape(), out)
    });

    let gb = need_b.then(|| {
        let mut out = vec![S::zero(); b.numel()];
        for i in 0..sa.batch {
            let gm = MatRef::new(&g.data()[i * g_len..(i + 1) * g_len], sg.rows, sg.cols, false);
            let am = &a.data()[i * a_len..(i + 1) * a_len];
            let (bo, beta) = if shared_b { (0, if i == 0 { S::zero() } else { S::one() }) } else { (i * b_len, S::zero()) };
            let dst = &mut out[bo..bo + b_len];
            if tb {
                // dB = Gᵀ · op(A)
                gemm(MatRef { trans: true, ..gm }, MatRef::new(am, sa.rows, sa.cols, ta), beta, dst);
            } else {
                // dB = op(A)ᵀ · G
                gemm(MatRef::new(am, sa.rows, sa.cols, !ta), gm, beta, dst);
            }
        }
        Tensor::new(b.shape(), out)
    });
    (ga, gb)
}

pub(crate) fn softmax<S: Scalar>(x: &Tensor<S>, scale: S, mask: Option<&Tensor<S>>) -> Tensor<S> {
    let n = *x.shape().last().expect("softmax on a scalar");
    let mask_len = mask.map(|m| suffix_split(x.shape(), m.shape()));
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        if let (Some(m), Some(len)) = (mask, mask_len) {
            let off = (r * n) % len;
            let mrow = &m.data()[off..off + n];
            row.iter_mut().zip(mrow).for_each(|(v, &mv)| *v = *v * scale + mv);
        } else {
            row.iter_mut().for_each(|v| *v = *v * scale);
        }
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn softmax_backward<S: Scalar>(g: &Tensor<S>, y: &Tensor<S>, scale: S) -> Tensor<S> {
    let n = *y.shape().last().unwrap();
    let mut out = vec![S::zero(); y.numel()];
    for ((o, gr), yr) in out.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
        let dot = gr.iter().zip(yr).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
        for j in 0..n {
            o[j] = scale * yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

pub(crate) fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S], eps: S) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let c = gamma.len();
    let rows = x.numel() / c;
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(x.numel());
    let inv_c = S::one() / S::lit(c as f64);
    for row in x.data().chunks(c) {
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..c {
            let h = (row[j] - mean) * r;
            xhat.push(h);
            out.push(h * gamma[j] + beta[j]);
        }
    }
    (Tensor::new(x.shape(), out), xhat, rstd)
}

pub(crate) fn layer_norm_backward<S: Scalar>(g: &Tensor<S>, gamma: &[S], xhat: &[S], rstd: &[S]) -> Tensor<S> {
    let c = gamma.len();
    let inv_c = S::one() / S::lit(c as f64);
    let mut out = vec![S::zero(); g.numel()];
    for (r, ((o, gr), xr)) in out.chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.chunks(c)).enumerate() {
        let mut mean_d = S::zero();
        let mut mean_dx = S::zero();
        for j in 0..c {
            let d = gr[j] * gamma[j];
            mean_d += d;
            mean_dx += d * xr[j];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        for j in 0..c {
            let d = gr[j] * gamma[j];
            o[j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
        }
    }
    Tensor::new(g.shape(), out)
}

/// Shapes of an NCHW convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW");
        assert_eq!(w.len(), 4, "conv2d kernel must be [Co, Ci, k, k]");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        assert_eq!(w[2], w[3], "conv2d expects square kernels");
        assert!(stride > 0);
        let k = w[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "conv2d kernel larger than padded input");
        let ho = (x[2] + 2 * pad - k) / stride + 1;
        let wo = (x[3] + 2 * pad - k) / stride + 1;
        Self { n: x[0], ci: x[1], h: x[2], w: x[3], co: w[0], k, stride, pad, ho, wo }
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(column_buffer_index, image_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ncols = self.col_cols();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * ncols + oy * self.wo + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&[S]>, geom: &ConvGeom) -> (Tensor<S>, Vec<S>) {
    let img = geom.ci * geom.h * geom.w;
    let col_len = geom.col_rows() * geom.col_cols();
    let out_len = geom.co * geom.col_cols();
    let mut cols = vec![S::zero(); geom.n * col_len];
    let mut out = vec![S::zero(); geom.n * out_len];
    for i in 0..geom.n {
        let src = &x.data()[i * img..(i + 1) * img];
        let dst = &mut cols[i * col_len..(i + 1) * col_len];
        geom.for_each_tap(|ci, si| dst[ci] = src[si]);
        let o = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = bias {
            for (ch, row) in o.chunks_mut(geom.col_cols()).enumerate() {
                row.iter_mut().for_each(|v| *v = b[ch]);
            }
        }
        gemm(
            MatRef::new(w.data(), geom.co, geom.col_rows(), false),
            MatRef::new(dst, geom.col_rows(), geom.col_cols(), false),
            if bias.is_some() { S::one() } else { S::zero() },
            o,
        );
    }
    (Tensor::new(&[geom.n, geom.co, geom.ho, geom.wo], out), cols)
}

pub(crate) fn conv2d_backward<S: Scalar>(
    g: &Tensor<S>,
    w: &Tensor<S>,
    cols: &[S],
    geom: &ConvGeom,
    need_x: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let img = geom.ci * geom.h * geom.w;
    let col_len = geom.col_rows() * geom.col_cols();
    let out_len = geom.co * geom.col_cols();
    let mut gw = vec![S::zero(); w.numel()];
    let mut gb = vec![S::zero(); geom.co];
    let mut gx = need_x.then(|| vec![S::zero(); geom.n * img]);
    let mut dcols = vec![S::zero(); col_len];
    for i in 0..geom.n {
        let go = &g.data()[i * out_len..(i + 1) * out_len];
        for (ch, row) in go.chunks(geom.col_cols()).enumerate() {
            gb[ch] += row.iter().fold(S::zero(), |a, &v| a + v);
        }
        let gm = MatRef::new(go, geom.co, geom.col_cols(), false);
        let cm = MatRef::new(&cols[i * col_len..(i + 1) * col_len], geom.col_rows(), geom.col_cols(), true);
        gemm(gm, cm, S::one(), &mut gw);
        if let Some(gx) = gx.as_mut() {
            gemm(MatRef::new(w.data(), geom.co, geom.col_rows(), true), gm, S::zero(), &mut dcols);
            let dst = &mut gx[i * img..(i + 1) * img];
            geom.for_each_tap(|ci, si| dst[si] += dcols[ci]);
        }
    }
    (
        gx.map(|v| Tensor::new(&[geom.n, geom.ci, geom.h, geom.w], v)),
        Tensor::new(w.shape(), gw),
        Tensor::new(&[geom.co], gb),
    )
}

pub(crate) fn gather_rows<S: Scalar>(x: &Tensor<S>, index: &[usize]) -> Tensor<S> {
    assert_eq!(x.rank(), 3, "gather_rows expects [B, N, D]");
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(b * index.len() * d);
    for bi in 0..b {
        for &r in index {
            assert!(r < n);
            let o = (bi * n + r) * d;
            out.extend_from_slice(&x.data()[o..o + d]);
        }
    }
    Tensor::new(&[b, index.len(), d], out)
}

pub(crate) fn scatter_rows<S: Scalar>(g: &Tensor<S>, index: &[usize], in_shape: &[usize]) -> Tensor<S> {
    let (b, n, d) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut out = vec![S::zero(); b * n * d];
    for bi in 0..b {
        for (j, &r) in index.iter().enumerate() {
            let src = &g.data()[(bi * index.len() + j) * d..][..d];
            let dst = &mut out[(bi * n + r) * d..][..d];
            dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
        }
    }
    Tensor::new(in_shape, out)
}

struct FieldShape {
    b: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn field_shape<S: Scalar>(f: &Tensor<S>, wx: &Tensor<S>, wy: &Tensor<S>) -> FieldShape {
    assert_eq!(f.rank(), 4, "smoothness expects a [B, h, w, k] field");
    let s = f.shape();
    assert_eq!(wx.shape(), &s[..3]);
    assert_eq!(wy.shape(), &s[..3]);
    assert!(s[1] >= 3 && s[2] >= 3, "smoothness needs at least 3 cells per axis");
    FieldShape { b: s[0], h: s[1], w: s[2], k: s[3] }
}

/// Visits every interior second difference as `(is_x, cell, [prev, cell, next], count)`.
fn for_each_second_diff(fs: &FieldShape, mut f: impl FnMut(bool, usize, [usize; 3], f64)) {
    let nx = (fs.b * fs.h * (fs.w - 2)) as f64;
    let ny = (fs.b * (fs.h - 2) * fs.w) as f64;
    for bi in 0..fs.b {
        for r in 0..fs.h {
            for c in 0..fs.w {
                let cell = (bi * fs.h + r) * fs.w + c;
                if c >= 1 && c + 1 < fs.w {
                    f(true, cell, [cell - 1, cell, cell + 1], nx);
                }
                if r >= 1 && r + 1 < fs.h {
                    f(false, cell, [cell - fs.w, cell, cell + fs.w], ny);
                }
            }
        }
    }
}

pub(crate) fn smoothness<S: Scalar>(f: &Tensor<S>, wx: &Tensor<S>, wy: &Tensor<S>) -> S {
    let fs = field_shape(f, wx, wy);
    let fv = f.data();
    let mut total = S::zero();
    for_each_second_diff(&fs, |is_x, cell, [p, c, n], norm| {
        let w = if is_x { wx.data()[cell] } else { wy.data()[cell] };
        let mut acc = S::zero();
        for j in 0..fs.k {
            acc += (fv[p * fs.k + j] - S::lit(2.0) * fv[c * fs.k + j] + fv[n * fs.k + j]).abs();
        }
        total += w * acc / S::lit(norm);
    });
    total
}

pub(crate) fn smoothness_backward<S: Scalar>(g: S, f: &Tensor<S>, wx: &Tensor<S>, wy: &Tensor<S>) -> Tensor<S> {
    let fs = field_shape(f, wx, wy);
    let fv = f.data();
    let mut out = vec![S::zero(); f.numel()];
    for_each_second_diff(&fs, |is_x, cell, [p, c, n], norm| {
        let w = if is_x { wx.data()[cell] } else { wy.data()[cell] };
        let coef = g * w / S::lit(norm);
        for j in 0..fs.k {
            let d = fv[p * fs.k + j] - S::lit(2.0) * fv[c * fs.k + j] + fv[n * fs.k + j];
            let s = if d > S::zero() {
                coef
            } else if d < S::zero() {
                -coef
            } else {
                S::zero()
            };
            out[p * fs.k + j] += s;
            out[c * fs.k + j] -= S::lit(2.0) * s;
            out[n * fs.k + j] += s;
        }
    });
    Tensor::new(f.shape(), out)
}

pub(crate) fn huber<S: Scalar>(p: &Tensor<S>, t: &Tensor<S>, delta: S) -> S {
    let k = *p.shape().last().unwrap();
    let cells = p.numel() / k;
    let mut total = S::zero();
    for (pr, tr) in p.data().chunks(k).zip(t.data().chunks(k)) {
        let e = pr.iter().zip(tr).fold(S::zero(), |a, (&x, &y)| a + (x - y) * (x - y)).sqrt();
        total += if e <= delta { S::lit(0.5) * e * e } else { delta * (e - S::lit(0.5) * delta) };
    }
    total / S::lit(cells as f64)
}

pub(crate) fn huber_backward<S: Scalar>(g: S, p: &Tensor<S>, t: &Tensor<S>, delta: S) -> Tensor<S> {
    let k = *p.shape().last().unwrap();
    let cells = p.numel() / k;
    let scale = g / S::lit(cells as f64);
    let mut out = vec![S::zero(); p.numel()];
    for ((o, pr), tr) in out.chunks_mut(k).zip(p.data().chunks(k)).zip(t.data().chunks(k)) {
        let e = pr.iter().zip(tr).fold(S::zero(), |a, (&x, &y)| a + (x - y) * (x - y)).sqrt();
        let factor = if e <= delta { scale } else { scale * delta / e };
        for j in 0..k {
            o[j] = factor * (pr[j] - tr[j]);
        }
    }
    Tensor::new(p.shape(), out)
}

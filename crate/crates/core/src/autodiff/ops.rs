//! Differentiable primitives recorded on a [`Tape`].
//!
//! Reductions run sequentially over the last axis in index order so that a
//! replay on the same inputs reproduces every bit. Batched products are split
//! across threads by batch entry only, which leaves each entry's arithmetic
//! unchanged.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::array::{strides, NdArray};
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::padding::{source_index, PadMode};
use crate::scalar::Scalar;

/// Additive logit used for masked positions.
pub const MASK_VALUE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryRule(Binary);

impl<T: Scalar> Backward<T> for BinaryRule {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (ga, gb) = grads.split_at_mut(1);
        if let Some(ga) = ga[0].as_mut() {
            for i in 0..g.len() {
                ga[i] += match self.0 {
                    Binary::Add | Binary::Sub => g[i],
                    Binary::Mul => g[i] * b[i],
                    Binary::Div => g[i] / b[i],
                };
            }
        }
        if let Some(gb) = gb[0].as_mut() {
            for i in 0..g.len() {
                gb[i] += match self.0 {
                    Binary::Add => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * a[i],
                    Binary::Div => -g[i] * a[i] / (b[i] * b[i]),
                };
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Sigmoid,
    Tanh,
    Gelu,
    Scale(f64),
    Shift,
}

struct UnaryRule(Unary);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Backward<T> for UnaryRule {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn backward(&self, inputs: &[&NdArray<T>], out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let (x, y) = (inputs[0].data(), out.data());
        for i in 0..g.len() {
            gx[i] += g[i]
                * match self.0 {
                    Unary::Exp => y[i],
                    Unary::Sigmoid => y[i] * (T::one() - y[i]),
                    Unary::Tanh => T::one() - y[i] * y[i],
                    Unary::Gelu => gelu_grad(x[i]),
                    Unary::Scale(c) => T::lit(c),
                    Unary::Shift => T::one(),
                };
        }
    }
}

struct AddBiasRule;

impl<T: Scalar> Backward<T> for AddBiasRule {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (gx, gb) = grads.split_at_mut(1);
        if let Some(gx) = gx[0].as_mut() {
            add_into(gx, g);
        }
        if let Some(gb) = gb[0].as_mut() {
            let n = gb.len();
            for row in g.chunks(n) {
                add_into(gb, row);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumRule {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        if let Some(gx) = grads[0].as_mut() {
            let v = g[0] * T::lit(self.scale);
            gx.iter_mut().for_each(|x| *x += v);
        }
    }
}

// ---------------------------------------------------------------------------
// products

struct MatMulRule {
    rows: usize,
    inner: usize,
    cols: usize,
    transpose_rhs: bool,
}

impl<T: Scalar> Backward<T> for MatMulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (m, k, n) = (self.rows, self.inner, self.cols);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        // rhs stored [k,n] (rs n, cs 1) or [n,k] (rs 1, cs k) when transposed
        let (rsb, csb) = if self.transpose_rhs { (1, k) } else { (n, 1) };
        let (ga, gb) = grads.split_at_mut(1);
        if let Some(ga) = ga[0].as_mut() {
            // dA[m,k] = G[m,n] · B^T
            T::gemm(m, n, k, T::one(), g, n, 1, b, csb, rsb, T::one(), ga, k, 1);
        }
        if let Some(gb) = gb[0].as_mut() {
            if self.transpose_rhs {
                // dB[n,k] = G^T · A
                T::gemm(n, m, k, T::one(), g, 1, n, a, k, 1, T::one(), gb, k, 1);
            } else {
                // dB[k,n] = A^T · G
                T::gemm(k, m, n, T::one(), a, 1, k, g, n, 1, T::one(), gb, n, 1);
            }
        }
    }
}

struct BatchMatMulRule {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_rhs: bool,
}

impl<T: Scalar> Backward<T> for BatchMatMulRule {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (rsb, csb) = if self.transpose_rhs { (1, k) } else { (n, 1) };
        let (ga, gb) = grads.split_at_mut(1);
        if let Some(ga) = ga[0].as_mut() {
            ga.par_chunks_mut(m * k).enumerate().for_each(|(i, ga)| {
                let g = &g[i * m * n..(i + 1) * m * n];
                let b = &b[i * k * n..(i + 1) * k * n];
                T::gemm(m, n, k, T::one(), g, n, 1, b, csb, rsb, T::one(), ga, k, 1);
            });
        }
        if let Some(gb) = gb[0].as_mut() {
            gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gb)| {
                let g = &g[i * m * n..(i + 1) * m * n];
                let a = &a[i * m * k..(i + 1) * m * k];
                if self.transpose_rhs {
                    T::gemm(n, m, k, T::one(), g, 1, n, a, k, 1, T::one(), gb, k, 1);
                } else {
                    T::gemm(k, m, n, T::one(), a, 1, k, g, n, 1, T::one(), gb, n, 1);
                }
            });
        }
        debug_assert_eq!(g.len(), self.batch * m * n);
    }
}

// ---------------------------------------------------------------------------
// layout

struct PermuteRule {
    axes: Vec<usize>,
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Backward<T> for PermuteRule {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let mut inverse = vec![0; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let (_, back) = permute_data(g, out.shape(), &inverse);
        add_into(gx, &back);
    }
}

struct ReshapeRule;

impl<T: Scalar> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        if let Some(gx) = grads[0].as_mut() {
            add_into(gx, g);
        }
    }
}

/// Copies contiguous blocks between a source laid out as `[outer, src_axis, inner]`
/// and a destination `[outer, dst_axis, inner]`, starting at `dst_start`.
fn copy_axis_block<T: Copy>(
    src: &[T],
    dst: &mut [T],
    outer: usize,
    inner: usize,
    src_axis: usize,
    src_start: usize,
    dst_axis: usize,
    dst_start: usize,
    len: usize,
    accumulate: impl Fn(&mut T, T),
) {
    for o in 0..outer {
        for a in 0..len {
            let s = (o * src_axis + src_start + a) * inner;
            let d = (o * dst_axis + dst_start + a) * inner;
            for i in 0..inner {
                accumulate(&mut dst[d + i], src[s + i]);
            }
        }
    }
}

struct NarrowRule {
    outer: usize,
    inner: usize,
    axis_len: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> Backward<T> for NarrowRule {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        if let Some(gx) = grads[0].as_mut() {
            copy_axis_block(
                g,
                gx,
                self.outer,
                self.inner,
                self.len,
                0,
                self.axis_len,
                self.start,
                self.len,
                |d, s| *d += s,
            );
        }
    }
}

struct ConcatRule {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let total: usize = self.sizes.iter().sum();
        let mut start = 0;
        for (slot, &len) in grads.iter_mut().zip(&self.sizes) {
            if let Some(gx) = slot.as_mut() {
                copy_axis_block(g, gx, self.outer, self.inner, total, start, len, 0, len, |d, s| *d += s);
            }
            start += len;
        }
    }
}

// ---------------------------------------------------------------------------
// indexing and noise

struct EmbeddingRule {
    ids: Vec<usize>,
}

impl<T: Scalar> Backward<T> for EmbeddingRule {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gt) = grads[0].as_mut() else { return };
        let d = inputs[0].last_dim();
        for (row, &id) in self.ids.iter().enumerate() {
            add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
        }
    }
}

struct MaskRule<T> {
    mask: Vec<T>,
}

impl<T: Scalar> Backward<T> for MaskRule<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        if let Some(gx) = grads[0].as_mut() {
            for i in 0..g.len() {
                gx[i] += g[i] * self.mask[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// normalisation and losses

struct SoftmaxRule;

impl<T: Scalar> Backward<T> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[&NdArray<T>], out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let n = out.last_dim();
        for ((y, g), gx) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
            let mut dot = T::zero();
            for j in 0..n {
                dot += g[j] * y[j];
            }
            for j in 0..n {
                gx[j] += y[j] * (g[j] - dot);
            }
        }
    }
}

struct LayerNormRule<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormRule<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let gain = inputs[1].data();
        let d = gain.len();
        let inv_d = T::lit(1.0 / d as f64);
        let (gx, rest) = grads.split_at_mut(1);
        let (gg, gb) = rest.split_at_mut(1);
        for (r, (g, xh)) in g.chunks(d).zip(self.xhat.chunks(d)).enumerate() {
            if let Some(gg) = gg[0].as_mut() {
                for j in 0..d {
                    gg[j] += g[j] * xh[j];
                }
            }
            if let Some(gb) = gb[0].as_mut() {
                add_into(gb, g);
            }
            if let Some(gx) = gx[0].as_mut() {
                let mut mean_dy = T::zero();
                let mut mean_dy_xh = T::zero();
                for j in 0..d {
                    let dy = g[j] * gain[j];
                    mean_dy += dy;
                    mean_dy_xh += dy * xh[j];
                }
                mean_dy *= inv_d;
                mean_dy_xh *= inv_d;
                let gx = &mut gx[r * d..(r + 1) * d];
                for j in 0..d {
                    gx[j] += self.rstd[r] * (g[j] * gain[j] - mean_dy - xh[j] * mean_dy_xh);
                }
            }
        }
    }
}

struct CrossEntropyRule<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyRule<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let v = inputs[0].last_dim();
        let scale = g[0] / T::lit(self.targets.len() as f64);
        for (r, &t) in self.targets.iter().enumerate() {
            let p = &self.probs[r * v..(r + 1) * v];
            let gx = &mut gx[r * v..(r + 1) * v];
            for j in 0..v {
                gx[j] += scale * p[j];
            }
            gx[t] -= scale;
        }
    }
}

struct CausalConvRule {
    pad: PadMode,
}

impl<T: Scalar> Backward<T> for CausalConvRule {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _out: &NdArray<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (x, kern) = (inputs[0].data(), inputs[1].data());
        let t_len = inputs[0].last_dim();
        let (gx, gk) = grads.split_at_mut(1);
        for (row, g) in g.chunks(t_len).enumerate() {
            let base = row * t_len;
            for t in 0..t_len {
                for (j, &w) in kern.iter().enumerate() {
                    if let Some(src) = source_index(t as isize - j as isize, t_len, self.pad) {
                        if let Some(gx) = gx[0].as_mut() {
                            gx[base + src] += g[t] * w;
                        }
                        if let Some(gk) = gk[0].as_mut() {
                            gk[j] += g[t] * x[base + src];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape front-end

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let out = NdArray::new(va.shape(), data)?;
        Ok(self.push(out, &[a, b], BinaryRule(op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    fn unary(&mut self, x: Var, op: Unary) -> Var {
        let out = match op {
            Unary::Exp => self.value(x).map(|v| v.exp()),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(|v| v.tanh()),
            Unary::Gelu => self.value(x).map(gelu),
            Unary::Scale(c) => self.value(x).map(|v| v * T::lit(c)),
            Unary::Shift => unreachable!("shift carries its offset separately"),
        };
        self.push(out, &[x], UnaryRule(op))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + T::lit(c));
        self.push(out, &[x], UnaryRule(Unary::Shift))
    }

    /// `x + b` with `b` broadcast over the leading axes of `x`; `b`'s shape
    /// must equal the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.ndim() < vb.ndim() || vx.shape()[vx.ndim() - vb.ndim()..] != *vb.shape() {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let bd = vb.data();
        let n = bd.len();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        let out = NdArray::new(vx.shape(), data)?;
        Ok(self.push(out, &[x, b], AddBiasRule))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(NdArray::scalar(s), &[x], SumRule { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len() as f64;
        let s = v.sum() / T::lit(n);
        self.push(NdArray::scalar(s), &[x], SumRule { scale: 1.0 / n })
    }

    /// `A[m,k] · B[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), k, 1, vb.data(), n, 1, T::zero(), &mut c, n, 1);
        let out = NdArray::new(&[m, n], c)?;
        Ok(self.push(
            out,
            &[a, b],
            MatMulRule {
                rows: m,
                inner: k,
                cols: n,
                transpose_rhs: false,
            },
        ))
    }

    /// `x[.., k] · W` with `W` of shape `[k, n]`, or `[n, k]` used transposed.
    pub fn linear(&mut self, x: Var, w: Var, transpose_w: bool) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vx.last_dim();
        if vw.ndim() != 2 {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let (wk, n) = if transpose_w {
            (vw.shape()[1], vw.shape()[0])
        } else {
            (vw.shape()[0], vw.shape()[1])
        };
        if wk != k {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let m = vx.len() / k;
        let (rsw, csw) = if transpose_w { (1, k) } else { (n, 1) };
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), vx.data(), k, 1, vw.data(), rsw, csw, T::zero(), &mut c, n, 1);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = NdArray::new(&shape, c)?;
        Ok(self.push(
            out,
            &[x, w],
            MatMulRule {
                rows: m,
                inner: k,
                cols: n,
                transpose_rhs: transpose_w,
            },
        ))
    }

    /// Batched product over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]^T` when `transpose_rhs`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_rhs: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let nd = va.ndim();
        if nd < 2 || vb.ndim() != nd || va.shape()[..nd - 2] != vb.shape()[..nd - 2] {
            return Err(Error::shape("bmm", va.shape(), vb.shape()));
        }
        let (m, k) = (va.shape()[nd - 2], va.shape()[nd - 1]);
        let (bk, n) = if transpose_rhs {
            (vb.shape()[nd - 1], vb.shape()[nd - 2])
        } else {
            (vb.shape()[nd - 2], vb.shape()[nd - 1])
        };
        if bk != k {
            return Err(Error::shape("bmm", va.shape(), vb.shape()));
        }
        let batch: usize = va.shape()[..nd - 2].iter().product();
        let (rsb, csb) = if transpose_rhs { (1, k) } else { (n, 1) };
        let mut c = vec![T::zero(); batch * m * n];
        let (ad, bd) = (va.data(), vb.data());
        c.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bd[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                c,
                n,
                1,
            );
        });
        let mut shape = va.shape()[..nd - 2].to_vec();
        shape.extend([m, n]);
        let out = NdArray::new(&shape, c)?;
        Ok(self.push(
            out,
            &[a, b],
            BatchMatMulRule {
                batch,
                m,
                k,
                n,
                transpose_rhs,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim() || axes.iter().any(|&a| a >= v.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", v.shape(), axes));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), axes);
        let out = NdArray::new(&shape, data)?;
        Ok(self.push(out, &[x], PermuteRule { axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.value(x).shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, &[x], ReshapeRule))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::Length {
                op: "narrow",
                detail: format!("axis {axis} range {start}..{} of shape {:?}", start + len, v.shape()),
            });
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let axis_len = v.shape()[axis];
        let mut data = vec![T::zero(); outer * len * inner];
        copy_axis_block(v.data(), &mut data, outer, inner, axis_len, start, len, 0, len, |d, s| *d = s);
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = NdArray::new(&shape, data)?;
        Ok(self.push(
            out,
            &[x],
            NarrowRule {
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        ))
    }

    /// Joins arrays that agree on every axis except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = vec![T::zero(); outer * total * inner];
        let mut start = 0;
        for (&x, &len) in xs.iter().zip(&sizes) {
            copy_axis_block(self.value(x).data(), &mut data, outer, inner, len, 0, total, start, len, |d, s| *d = s);
            start += len;
        }
        let mut shape = first;
        shape[axis] = total;
        let out = NdArray::new(&shape, data)?;
        Ok(self.push(out, xs, ConcatRule { outer, inner, sizes }))
    }

    /// Rows of `table[V, d]` selected by `ids`; output shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", vt.shape(), lead));
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = NdArray::new(&shape, data)?;
        Ok(self.push(out, &[table], EmbeddingRule { ids: ids.to_vec() }))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = NdArray::new(v.shape(), data)?;
        Ok(self.push(out, &[x], MaskRule { mask }))
    }

    /// Softmax over the last axis after adding `mask`, whose shape must be a
    /// suffix of `x`'s shape. Masked entries should carry [`MASK_VALUE`].
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&NdArray<T>>) -> Result<Var> {
        let v = self.value(x);
        if let Some(m) = mask {
            let nd = v.ndim();
            if m.ndim() > nd || v.shape()[nd - m.ndim()..] != *m.shape() {
                return Err(Error::shape("softmax_lastdim", v.shape(), m.shape()));
            }
        }
        let n = v.last_dim();
        let mut data = Vec::with_capacity(v.len());
        let mut all_masked = 0;
        let threshold = T::lit(MASK_VALUE / 2.0);
        let mut row = vec![T::zero(); n];
        for (r, xs) in v.data().chunks(n).enumerate() {
            let mut masked = 0;
            for j in 0..n {
                row[j] = xs[j];
                if let Some(m) = mask {
                    let mv = m.data()[(r * n + j) % m.len()];
                    if mv <= threshold {
                        masked += 1;
                    }
                    row[j] += mv;
                }
            }
            if masked == n {
                all_masked += 1;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                s += *r;
            }
            data.extend(row.iter().map(|&e| e / s));
        }
        let out = NdArray::new(v.shape(), data)?;
        if all_masked > 0 {
            self.flag_all_masked(all_masked);
        }
        Ok(self.push(out, &[x], SoftmaxRule))
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let rows = vx.len() / d;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vx.len());
        for xs in vx.data().chunks(d) {
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (xs[j] - mean) * r;
                xhat.push(h);
                data.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = NdArray::new(vx.shape(), data)?;
        Ok(self.push(out, &[x, gain, bias], LayerNormRule { xhat, rstd }))
    }

    /// Causal convolution along the last axis: `y[t] = Σ_j k[j]·x[t-j]`,
    /// with negative positions resolved by `pad`.
    pub fn causal_conv1d(&mut self, signal: Var, kernel: Var, pad: PadMode) -> Result<Var> {
        let (vx, vk) = (self.value(signal), self.value(kernel));
        let t_len = vx.last_dim();
        if vk.ndim() != 1 {
            return Err(Error::shape("causal_conv1d", vx.shape(), vk.shape()));
        }
        if pad == PadMode::Reflect && vk.len() > t_len {
            return Err(Error::Length {
                op: "causal_conv1d",
                detail: format!(
                    "kernel of {} taps needs {} reflected samples but the signal has {t_len}",
                    vk.len(),
                    vk.len() - 1
                ),
            });
        }
        let kern = vk.data();
        let mut data = vec![T::zero(); vx.len()];
        for (xs, ys) in vx.data().chunks(t_len).zip(data.chunks_mut(t_len)) {
            for (t, y) in ys.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (j, &w) in kern.iter().enumerate() {
                    if let Some(src) = source_index(t as isize - j as isize, t_len, pad) {
                        acc += w * xs[src];
                    }
                }
                *y = acc;
            }
        }
        let out = NdArray::new(vx.shape(), data)?;
        Ok(self.push(out, &[signal, kernel], CausalConvRule { pad }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// in nats. `targets` indexes the rows of `logits` flattened to `[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let vocab = v.last_dim();
        if v.len() / vocab != targets.len() {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut total = 0.0f64;
        for (xs, &t) in v.data().chunks(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &x in xs {
                s += (x - mx).exp();
            }
            let lse = mx + s.ln();
            total += (lse - xs[t]).as_f64();
            probs.extend(xs.iter().map(|&x| (x - lse).exp()));
        }
        let loss = T::lit(total / targets.len() as f64);
        Ok(self.push(
            NdArray::scalar(loss),
            &[logits],
            CrossEntropyRule {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }
}

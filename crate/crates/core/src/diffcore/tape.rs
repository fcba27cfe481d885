//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse, accumulating
//! vector-Jacobian products into the parents that need a gradient. Leaves are
//! either trainable parameters or constants; constants (frozen weights, data)
//! never receive a gradient and the work for them is skipped.

use std::ops::Range;

use super::array::Array;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

/// Arithmetic precision of a tape.
///
/// Values are always stored as `f64`. In [`Precision::Single`] every forward
/// result and every gradient is rounded through `f32`, which reproduces the
/// behaviour of a 32-bit pipeline bit-for-bit on a single thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::Single),
            64 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norm_b: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Range<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "Leaf",
            Op::Add(..) => "Add",
            Op::Sub(..) => "Sub",
            Op::Mul(..) => "Mul",
            Op::Scale(..) => "Scale",
            Op::AddConst(..) => "AddConst",
            Op::MatMul(..) => "MatMul",
            Op::Transpose(..) => "Transpose",
            Op::Reshape(..) => "Reshape",
            Op::Expand(..) => "Expand",
            Op::Concat(..) => "Concat",
            Op::Slice(..) => "Slice",
            Op::Sum(..) => "Sum",
            Op::MeanAxis(..) => "MeanAxis",
            Op::Softmax(..) => "Softmax",
            Op::LayerNorm { .. } => "LayerNorm",
            Op::Relu(..) => "Relu",
            Op::Gelu(..) => "Gelu",
            Op::Sigmoid(..) => "Sigmoid",
            Op::Log(..) => "Log",
            Op::Clamp(..) => "Clamp",
            Op::CosineRows { .. } => "CosineRows",
            Op::CrossEntropy { .. } => "CrossEntropy",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
    param_name: Option<String>,
}

/// Record of a forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    relu_signature: u64,
    relu_zero_hits: usize,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if `var` is not a parameter and no
    /// gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter leaf. Panics for vars without a gradient.
    pub fn wrt(&self, var: Var) -> &Array {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for {var:?}"))
    }
}

fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    let b_len: usize = b.iter().product();
    if b_len == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// `c += a · b` with a `m×k`, b `k×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with a `m×n`, b `k×n`, c `m×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + kk] += dot;
        }
    }
}

/// `c += aᵀ · g` with a `m×k`, g `m×n`, c `k×n`.
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += aik * gv;
            }
        }
    }
}

fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::Double)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            relu_signature: 0xcbf2_9ce4_8422_2325,
            relu_zero_hits: 0,
            first_non_finite: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].param_name.as_deref()
    }

    /// Hash of the on/off pattern of every relu evaluated so far. Two forward
    /// passes with equal signatures took the same linear piece everywhere.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    /// Number of relu inputs that were exactly zero.
    pub fn relu_zero_hits(&self) -> usize {
        self.relu_zero_hits
    }

    /// Node index and operation of the first non-finite forward value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    fn push(&mut self, mut value: Array, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::Single {
            value.round_to_f32();
        }
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Array) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param_name = Some(name.into());
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_compatible(av.shape(), bv.shape()) {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let inner = bv.len();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % inner]))
            .collect();
        Ok(Array::from_parts(av.shape().to_vec(), data))
    }

    /// Elementwise `a + b`; `b` may be a single value or match a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddConst(a), ng)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared across the leading
    /// axes of `a`) or `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let shared = bsh.len() == 2;
        if k != kb || (!shared && ash[..ash.len() - 2] != bsh[..bsh.len() - 2]) {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if shared {
                gemm_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm_acc(
                        &ad[bi * m * k..(bi + 1) * m * k],
                        &bd[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array::from_parts(shape, out), Op::MatMul(a, b), ng))
    }

    /// Axis permutation.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("transpose", format!("permutation {perm:?} invalid for shape {shape:?}")));
        }
        let (out_shape, data) = permute(self.value(a).data(), &shape, perm);
        let ng = self.needs(a);
        Ok(self.push(Array::from_parts(out_shape, data), Op::Transpose(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::invalid("transpose_last", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.transpose(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(Error::invalid("expand", format!("axis {axis} of {shape:?} cannot expand to {n}")));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        let ng = self.needs(a);
        Ok(self.push(Array::from_parts(out_shape, data), Op::Expand(a, axis), ng))
    }

    /// Inserts a leading axis of size `n` by repetition.
    pub fn broadcast_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape(a));
        let r = self.reshape(a, &shape)?;
        self.expand(r, 0, n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Array::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `a[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || range.start >= range.end || range.end > shape[axis] {
            return Err(Error::invalid("slice", format!("range {range:?} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&src[base + range.start * inner..base + range.end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let ng = self.needs(a);
        Ok(self.push(Array::from_parts(out_shape, data), Op::Slice(a, axis, range.start), ng))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Array::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..n {
                let row = &src[(o * n + r) * inner..(o * n + r + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.needs(a);
        Ok(self.push(Array::from_parts(out_shape, data), Op::MeanAxis(a, axis), ng))
    }

    /// Softmax along `axis`; the maximum is subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| (o * n + r) * inner + i;
                let max = (0..n).map(|r| src[at(r)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for r in 0..n {
                    let e = (src[at(r)] - max).exp();
                    data[at(r)] = e;
                    total += e;
                }
                for r in 0..n {
                    data[at(r)] /= total;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Array::from_parts(shape, data), Op::Softmax(a, axis), ng))
    }

    /// Layer normalization over the last axis with scale `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / d;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Array::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut sig = self.relu_signature;
        let mut zeros = 0;
        let out = {
            let v = self.value(a);
            for &x in v.data() {
                if x == 0.0 {
                    zeros += 1;
                }
                sig = (sig ^ u64::from(x > 0.0)).wrapping_mul(0x0100_0000_01b3);
            }
            v.map(|x| x.max(0.0))
        };
        self.relu_signature = sig;
        self.relu_zero_hits += zeros;
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::invalid("log", format!("non-positive input {bad}")));
        }
        let out = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Cosine similarity of every row of `a` (`[n, D]`) with `b` (`[D]`).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 1 || ash[1] != bsh[0] {
            return Err(Error::shape("cosine_rows", &ash, &bsh));
        }
        let d = bsh[0];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let norm_b = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_b == 0.0 {
            return Err(Error::invalid("cosine_rows", "zero-norm vector"));
        }
        let mut norms_a = Vec::with_capacity(ash[0]);
        let mut out = Vec::with_capacity(ash[0]);
        for row in av.chunks(d) {
            let na = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 {
                return Err(Error::invalid("cosine_rows", "zero-norm vector"));
            }
            let dot: f64 = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            norms_a.push(na);
            out.push(dot / (na * norm_b));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::from_vec(out),
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits` (`[B, C]`) restricted to the columns in
    /// `active`; columns outside `active` take no part in the softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: Range<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        if active.start >= active.end || active.end > c {
            return Err(Error::invalid("cross_entropy", format!("active classes {active:?} out of 0..{c}")));
        }
        if let Some(t) = targets.iter().find(|t| !active.contains(t)) {
            return Err(Error::invalid("cross_entropy", format!("target {t} outside active classes {active:?}")));
        }
        let width = active.end - active.start;
        let src = self.value(logits).data();
        let mut probs = vec![0.0; targets.len() * width];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c + active.start..r * c + active.end];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * width + j] = (v - lse).exp();
            }
            loss += lse - row[t - active.start];
        }
        loss /= targets.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter leaf on the tape receives a gradient; parameters that
    /// do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_param = matches!(node.op, Op::Leaf) && node.needs_grad;
            if is_param {
                let g = grads[i].get_or_insert_with(|| Array::zeros(node.value.shape()));
                if self.precision == Precision::Single {
                    g.round_to_f32();
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], target: Var, delta: Array) {
        debug_assert_eq!(delta.shape(), self.shape(target));
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Sums `g` down to the broadcast shape of `target`.
    fn reduce_broadcast(&self, g: &Array, target: Var) -> Array {
        let tshape = self.shape(target);
        let inner = self.value(target).len();
        let mut out = vec![0.0; inner];
        for (i, &v) in g.data().iter().enumerate() {
            out[i % inner] += v;
        }
        Array::from_parts(tshape.to_vec(), out)
    }

    fn propagate(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut gb = self.reduce_broadcast(g, *b);
                    if matches!(node.op, Op::Sub(..)) {
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = bv.len();
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bv.data()[i % inner])
                        .collect();
                    self.accumulate(grads, *a, Array::from_parts(av.shape().to_vec(), data));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let ga = Array::from_parts(av.shape().to_vec(), prod);
                    let gb = self.reduce_broadcast(&ga, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.map(|v| v * f));
                }
            }
            Op::AddConst(a) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ash = av.shape();
                let bsh = bv.shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let shared = bsh.len() == 2;
                if self.needs(*a) {
                    let mut ga = vec![0.0; av.len()];
                    if shared {
                        gemm_nt_acc(g.data(), bv.data(), &mut ga, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            gemm_nt_acc(
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    self.accumulate(grads, *a, Array::from_parts(ash.to_vec(), ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    if shared {
                        gemm_tn_acc(av.data(), g.data(), &mut gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_tn_acc(
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Array::from_parts(bsh.to_vec(), gb));
                }
            }
            Op::Transpose(a, perm) => {
                if self.needs(*a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (shape, data) = permute(g.data(), out.shape(), &inverse);
                    self.accumulate(grads, *a, Array::from_parts(shape, data));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let shape = self.shape(*a).to_vec();
                    self.accumulate(grads, *a, Array::from_parts(shape, g.data().to_vec()));
                }
            }
            Op::Expand(a, axis) => {
                if self.needs(*a) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for r in 0..n {
                            let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                            for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    let shape = self.shape(*a).to_vec();
                    self.accumulate(grads, *a, Array::from_parts(shape, data));
                }
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + width]);
                        }
                        self.accumulate(grads, p, Array::from_parts(self.shape(p).to_vec(), data));
                    }
                    offset += width;
                }
            }
            Op::Slice(a, axis, start) => {
                if self.needs(*a) {
                    let shape = self.shape(*a).to_vec();
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    let width = out.shape()[*axis];
                    let mut data = vec![0.0; self.value(*a).len()];
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        data[dst..dst + width * inner]
                            .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                    }
                    self.accumulate(grads, *a, Array::from_parts(shape, data));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, Array::full(self.shape(*a), g.item()));
                }
            }
            Op::MeanAxis(a, axis) => {
                if self.needs(*a) {
                    let shape = self.shape(*a).to_vec();
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    let inv = 1.0 / n as f64;
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let chunk = &g.data()[o * inner..(o + 1) * inner];
                        for _ in 0..n {
                            data.extend(chunk.iter().map(|v| v * inv));
                        }
                    }
                    self.accumulate(grads, *a, Array::from_parts(shape, data));
                }
            }
            Op::Softmax(a, axis) => {
                if self.needs(*a) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let (y, gd) = (out.data(), g.data());
                    let mut data = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |r: usize| (o * n + r) * inner + i;
                            let dot: f64 = (0..n).map(|r| y[at(r)] * gd[at(r)]).sum();
                            for r in 0..n {
                                data[at(r)] = y[at(r)] * (gd[at(r)] - dot);
                            }
                        }
                    }
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                let rows = out.len() / d;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut data = vec![0.0; out.len()];
                    for r in 0..rows {
                        let mut sum_g = 0.0;
                        let mut sum_gh = 0.0;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gam[j];
                            sum_g += gh;
                            sum_gh += gh * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gam[j];
                            data[r * d + j] = scale * (d as f64 * gh - sum_g - xhat[r * d + j] * sum_gh);
                        }
                    }
                    self.accumulate(grads, *x, Array::from_parts(out.shape().to_vec(), data));
                }
                if self.needs(*gamma) {
                    let mut data = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            data[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Array::from_parts(vec![d], data));
                }
                if self.needs(*beta) {
                    let mut data = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            data[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *beta, Array::from_parts(vec![d], data));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let data = g.data().iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let data = g.data().iter().zip(x).map(|(&gv, &xv)| gv * gelu(xv).1).collect();
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let data = g.data().iter().zip(out.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let data = g.data().iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), data));
                }
            }
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = bv.len();
                let cos = out.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; d];
                for (r, row) in av.data().chunks(d).enumerate() {
                    let gr = g.data()[r];
                    let (na, c) = (norms_a[r], cos[r]);
                    for j in 0..d {
                        ga[r * d + j] = gr * (bv.data()[j] / (na * norm_b) - c * row[j] / (na * na));
                        gb[j] += gr * (row[j] / (na * norm_b) - c * bv.data()[j] / (norm_b * norm_b));
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, Array::from_parts(av.shape().to_vec(), ga));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Array::from_parts(vec![d], gb));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                if self.needs(*logits) {
                    let shape = self.shape(*logits).to_vec();
                    let c = shape[1];
                    let width = active.end - active.start;
                    let scale = g.item() / targets.len() as f64;
                    let mut data = vec![0.0; shape[0] * c];
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..width {
                            let onehot = if active.start + j == t { 1.0 } else { 0.0 };
                            data[r * c + active.start + j] = scale * (probs[r * width + j] - onehot);
                        }
                    }
                    self.accumulate(grads, *logits, Array::from_parts(shape, data));
                }
            }
        }
    }
}

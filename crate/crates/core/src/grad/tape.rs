//! Append-only recording of primitive applications and their reverse pass.

use std::collections::BTreeMap;

use smallvec::{smallvec, SmallVec};

use super::meter::MemoryMeter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// 1-D operand matching the last axis, repeated over rows.
    Row,
    /// Single element.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Param,
    Matmul,
    Transpose,
    Add(Bcast),
    Sub,
    Mul(Bcast),
    Scale(S),
    Shift,
    Concat,
    Slice { start: usize },
    Reshape,
    Softmax,
    Sigmoid,
    Ln,
    Exp,
    Gelu,
    LayerNorm,
    Sum,
    Mean,
    L1,
    L2,
    Clamp01,
    Embedding { index: usize },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    inputs: SmallVec<[usize; 2]>,
    value: Tensor<S>,
    /// Extra per-node state kept for the reverse pass (layer-norm inverse std).
    saved: Option<Vec<S>>,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation over [`Tensor`]s.
///
/// Leaves come in two kinds: [`Tape::constant`] (no gradient) and
/// [`Tape::param`] (gradient returned by the backward pass). Leaves alias the
/// caller's storage and are not counted as retained floats; every recorded
/// primitive output (and any extra saved state) is. A tape is consumed by
/// its backward pass.
#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    live: usize,
    peak: usize,
    meter: MemoryMeter,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Drop for Tape<S> {
    fn drop(&mut self) {
        self.meter.release(self.live);
    }
}

/// Accumulated gradients for every `param` leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(&var)
    }

    pub fn wrt(&self, var: Var) -> Result<&Tensor<S>> {
        self.grads
            .get(&var)
            .ok_or_else(|| Error::Contract(format!("node {} is not a param leaf", var.0)))
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor<S>> {
        self.grads
            .remove(&var)
            .ok_or_else(|| Error::Contract(format!("node {} is not a param leaf", var.0)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<S>)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::with_meter(MemoryMeter::new())
    }

    /// A tape that reports retained floats into a shared meter.
    pub fn with_meter(meter: MemoryMeter) -> Self {
        Self {
            nodes: Vec::new(),
            live: 0,
            peak: 0,
            meter,
        }
    }

    pub fn meter(&self) -> &MemoryMeter {
        &self.meter
    }

    /// Floats currently retained for the reverse pass.
    pub fn live_float_count(&self) -> usize {
        self.live
    }

    pub fn peak_float_count(&self) -> usize {
        self.peak
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(Op::Constant, t, false)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(Op::Param, t, true)
    }

    fn leaf(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs: SmallVec::new(),
            value,
            saved: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: Op<S>,
        name: &'static str,
        inputs: SmallVec<[usize; 2]>,
        value: Tensor<S>,
        saved: Option<Vec<S>>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let floats = value.numel() + saved.as_ref().map_or(0, Vec::len);
        self.live += floats;
        self.peak = self.peak.max(self.live);
        self.meter.acquire(floats);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            Ok(Bcast::Row)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        bc: Bcast,
        op: Op<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b).data();
        let w = va.last_dim();
        let out: Vec<S> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => vb[i],
                    Bcast::Row => vb[i % w],
                    Bcast::Scalar => vb[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(op, name, smallvec![a.0, b.0], value, None)
    }

    fn unary(&mut self, a: Var, op: Op<S>, name: &'static str, f: impl Fn(S) -> S) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, name, smallvec![a.0], value, None)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = matmul_raw(va, vb);
        self.push(Op::Matmul, "matmul", smallvec![a.0, b.0], value, None)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = transpose_raw(va);
        self.push(Op::Transpose, "transpose", smallvec![a.0], value, None)
    }

    /// Elementwise sum; `b` may also be a last-axis row or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("add", a, b)?;
        self.binary(a, b, bc, Op::Add(bc), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        self.binary(a, b, Bcast::Same, Op::Sub, "sub", |x, y| x - y)
    }

    /// Elementwise product; `b` may also be a last-axis row or a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("mul", a, b)?;
        self.binary(a, b, bc, Op::Mul(bc), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        self.unary(a, Op::Scale(k), "scale", |x| x * k)
    }

    /// Adds a constant scalar to every element.
    pub fn shift(&mut self, a: Var, k: S) -> Result<Var> {
        self.unary(a, Op::Shift, "shift", |x| x + k)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero operands".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err("concat", first, p));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::from_parts(shape, out);
        self.push(
            Op::Concat,
            "concat",
            parts.iter().map(|p| p.0).collect(),
            value,
            None,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let w = va.last_dim();
        if len == 0 || start + len > w {
            return Err(Error::Shape {
                op: "slice",
                lhs: va.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = (0..va.outer())
            .flat_map(|r| va.row(r)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_parts(shape, out);
        self.push(Op::Slice { start }, "slice", smallvec![a.0], value, None)
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        if widths.iter().sum::<usize>() != self.value(a).last_dim() {
            return Err(Error::Shape {
                op: "split",
                lhs: self.shape(a).to_vec(),
                rhs: widths.to_vec(),
            });
        }
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let v = self.slice(a, start, w);
                start += w;
                v
            })
            .collect()
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape, "reshape", smallvec![a.0], value, None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.last_dim();
        let mut out = Vec::with_capacity(va.numel());
        for r in 0..va.outer() {
            let row = va.row(r);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - m).exp()));
            let z: S = out[start..start + w].iter().copied().sum();
            out[start..].iter_mut().for_each(|x| *x = *x / z);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(Op::Softmax, "softmax", smallvec![a.0], value, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln, "ln", S::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, "exp", S::exp)
    }

    /// GELU in the exact Gaussian-CDF form `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu, "gelu", |x| x * std_normal_cdf(x))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.last_dim();
        let n = S::of(w as f64);
        let eps = S::of(LAYER_NORM_EPS);
        let mut out = Vec::with_capacity(va.numel());
        let mut inv_std = Vec::with_capacity(va.outer());
        for r in 0..va.outer() {
            let row = va.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(Op::LayerNorm, "layer_norm", smallvec![a.0], value, Some(inv_std))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, "sum", smallvec![a.0], value, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::scalar(va.sum() / S::of(va.numel() as f64));
        self.push(Op::Mean, "mean", smallvec![a.0], value, None)
    }

    /// `sum |x|`.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        self.push(Op::L1, "l1_norm", smallvec![a.0], value, None)
    }

    /// `sqrt(sum x^2)`; the reverse pass uses a zero subgradient at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).norm_l2());
        self.push(Op::L2, "l2_norm", smallvec![a.0], value, None)
    }

    /// `min(1, max(0, x))`; gradient passes where `0 <= x <= 1`.
    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Clamp01, "clamp01", |x| x.max(S::zero()).min(S::one()))
    }

    /// Row `index` of a `[n, d]` table, as a `[d]` vector.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || index >= vt.shape()[0] {
            return Err(Error::Shape {
                op: "embedding",
                lhs: vt.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let value = Tensor::vector(vt.row(index).to_vec());
        self.push(
            Op::Embedding { index },
            "embedding",
            smallvec![table.0],
            value,
            None,
        )
    }

    /// Gradients of a scalar `loss` with respect to every param leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(&[(loss, Tensor::scalar(S::one()))])
    }

    /// Reverse pass seeded with explicit output cotangents.
    pub fn backward_from(self, seeds: &[(Var, Tensor<S>)]) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        for (v, c) in seeds {
            if c.shape() != self.shape(*v) {
                return Err(Error::Shape {
                    op: "cotangent",
                    lhs: self.shape(*v).to_vec(),
                    rhs: c.shape().to_vec(),
                });
            }
            accumulate(&mut grads[v.0], c.data());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                out.insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = &node.value;
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let mut send = |k: usize, contrib: Vec<S>| {
            accumulate(&mut grads[node.inputs[k]], &contrib);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Matmul => {
                let (a, b) = (inp(0), inp(1));
                let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec());
                if wants(0) {
                    send(0, matmul_raw(&gt, &transpose_raw(b)).to_vec());
                }
                if wants(1) {
                    send(1, matmul_raw(&transpose_raw(a), &gt).to_vec());
                }
            }
            Op::Transpose => {
                let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec());
                send(0, transpose_raw(&gt).to_vec());
            }
            Op::Add(bc) => {
                if wants(0) {
                    send(0, g.to_vec());
                }
                if wants(1) {
                    send(1, reduce_bcast(*bc, g, inp(1).numel()));
                }
            }
            Op::Sub => {
                if wants(0) {
                    send(0, g.to_vec());
                }
                if wants(1) {
                    send(1, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(bc) => {
                let (a, b) = (inp(0).data(), inp(1).data());
                let w = y.last_dim();
                let pick = |i: usize| match bc {
                    Bcast::Same => b[i],
                    Bcast::Row => b[i % w],
                    Bcast::Scalar => b[0],
                };
                if wants(0) {
                    send(0, g.iter().enumerate().map(|(i, &gi)| gi * pick(i)).collect());
                }
                if wants(1) {
                    let full: Vec<S> = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect();
                    send(1, reduce_bcast(*bc, &full, b.len()));
                }
            }
            Op::Scale(k) => send(0, g.iter().map(|&x| x * *k).collect()),
            Op::Shift | Op::Reshape => send(0, g.to_vec()),
            Op::Concat => {
                let rows = y.outer();
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let wk = inp(k).last_dim();
                    if wants(k) {
                        let wy = y.last_dim();
                        let part = (0..rows)
                            .flat_map(|r| g[r * wy + offset..r * wy + offset + wk].iter().copied())
                            .collect();
                        send(k, part);
                    }
                    offset += wk;
                }
            }
            Op::Slice { start } => {
                let a = inp(0);
                let (wa, wy) = (a.last_dim(), y.last_dim());
                let mut full = vec![S::zero(); a.numel()];
                for r in 0..a.outer() {
                    full[r * wa + start..r * wa + start + wy].copy_from_slice(&g[r * wy..(r + 1) * wy]);
                }
                send(0, full);
            }
            Op::Softmax => {
                let w = y.last_dim();
                let mut out = Vec::with_capacity(g.len());
                for r in 0..y.outer() {
                    let (yr, gr) = (y.row(r), &g[r * w..(r + 1) * w]);
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                send(0, out);
            }
            Op::Sigmoid => send(
                0,
                g.iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (S::one() - yi))
                    .collect(),
            ),
            Op::Ln => send(0, g.iter().zip(inp(0).data()).map(|(&gi, &x)| gi / x).collect()),
            Op::Exp => send(0, g.iter().zip(y.data()).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Gelu => send(
                0,
                g.iter()
                    .zip(inp(0).data())
                    .map(|(&gi, &x)| gi * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                    .collect(),
            ),
            Op::LayerNorm => {
                let inv_std = node.saved.as_ref().expect("layer norm saves inverse std");
                let w = y.last_dim();
                let n = S::of(w as f64);
                let mut out = Vec::with_capacity(g.len());
                for r in 0..y.outer() {
                    let (yr, gr) = (y.row(r), &g[r * w..(r + 1) * w]);
                    let gm = gr.iter().copied().sum::<S>() / n;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gi, &yi)| inv_std[r] * (gi - gm - yi * gym)),
                    );
                }
                send(0, out);
            }
            Op::Sum => send(0, vec![g[0]; inp(0).numel()]),
            Op::Mean => {
                let n = inp(0).numel();
                send(0, vec![g[0] / S::of(n as f64); n]);
            }
            Op::L1 => send(0, inp(0).data().iter().map(|&x| g[0] * sign(x)).collect()),
            Op::L2 => {
                let norm = y.data()[0];
                let a = inp(0).data();
                if norm > S::zero() {
                    send(0, a.iter().map(|&x| g[0] * x / norm).collect());
                } else {
                    send(0, vec![S::zero(); a.len()]);
                }
            }
            Op::Clamp01 => send(
                0,
                g.iter()
                    .zip(inp(0).data())
                    .map(|(&gi, &x)| {
                        if x >= S::zero() && x <= S::one() {
                            gi
                        } else {
                            S::zero()
                        }
                    })
                    .collect(),
            ),
            Op::Embedding { index } => {
                let t = inp(0);
                let d = t.last_dim();
                let mut full = vec![S::zero(); t.numel()];
                full[index * d..(index + 1) * d].copy_from_slice(g);
                send(0, full);
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: &[S]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, &c)| *a = *a + c),
        None => *slot = Some(contrib.to_vec()),
    }
}

fn reduce_bcast<S: Scalar>(bc: Bcast, g: &[S], n: usize) -> Vec<S> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Row => {
            let mut out = vec![S::zero(); n];
            for (i, &x) in g.iter().enumerate() {
                out[i % n] = out[i % n] + x;
            }
            out
        }
        Bcast::Scalar => vec![g.iter().copied().sum()],
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o = *o + aip * bv);
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose_raw<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    Tensor::from_fn([n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    })
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn std_normal_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5) * (S::one() + (x / S::of(std::f64::consts::SQRT_2)).erf())
}

fn std_normal_pdf<S: Scalar>(x: S) -> S {
    (-(x * x) / S::of(2.0)).exp() / S::of((2.0 * std::f64::consts::PI).sqrt())
}

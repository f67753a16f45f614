//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node to the tape and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in exact reverse order, so each node's
//! vector-Jacobian product runs at most once per pass. Parameters are borrowed
//! from a [`ParamStore`] rather than copied, and a parameter used several
//! times in one forward pass maps to a single leaf whose gradient is the sum
//! of all uses.
//!
//! A tape is single-threaded and single-use: call [`Tape::reset`] before
//! reusing it after a backward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{DatError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var, tanh: Vec<f64> },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Mse { pred: Var, target: Vec<f64>, weights: Vec<f64>, wsum: f64 },
    CccLoss { pred: Var, target: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // x * 0 is 0 for finite x and NaN otherwise; the sum vectorizes.
    if data.iter().fold(0.0, |acc, v| acc + v * 0.0) == 0.0 {
        return Ok(());
    }
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DatError::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

/// Derivative given `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Weighted population moments `(mean_x, mean_y, var_x, var_y, cov)`.
pub(crate) fn weighted_moments(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64, f64, f64) {
    let wsum: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        let (da, db) = (a - mx, b - my);
        vx += wi * da * da;
        vy += wi * db * db;
        cxy += wi * da * db;
    }
    (mx, my, vx / wsum, vy / wsum, cxy / wsum)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and gradient so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.grads = None;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, rg))
    }

    /// A value that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf that does receive a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- forward ops ---------------------------------------------------

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared across all leading batch axes of `a`, or has the same batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(DatError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != kb || !(batch_b.is_empty() || batch_a == batch_b) {
            return Err(DatError::shape("matmul", &sa, &sb));
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if batch_b.is_empty() {
                let rows = av.len() / k.max(1);
                gemm_acc(rows, k, n, av, false, bv, false, &mut out);
            } else {
                let batches: usize = batch_a.iter().product();
                for i in 0..batches {
                    gemm_acc(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg)
    }

    /// `a · bᵀ` for 2-D `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(DatError::shape("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.rank() == 0 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|x| f(*x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else {
            Err(DatError::shape(name, ta.shape(), tb.shape()))
        }
    }

    /// Element-wise sum; `b` may also be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("add", out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("sub", out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("mul", out, Op::Mul { a, b }, rg)
    }

    /// Adds a `[n]` vector to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || tb.numel() != ta.last_dim() {
            return Err(DatError::shape("add_row", ta.shape(), tb.shape()));
        }
        let n = tb.numel();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        self.push_checked("add_row", out, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.requires_grad(a);
        self.push_checked("scale", out, Op::Scale { a, c }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let tanh: Vec<f64> = ta.data().iter().map(|&x| gelu_tanh(x)).collect();
        let y = ta.data().iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let out = Tensor::new(ta.shape().to_vec(), y)?;
        let rg = self.requires_grad(a);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push_checked("gelu", out, Op::Gelu { a, tanh }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())?;
        let rg = self.requires_grad(a);
        self.push_checked("relu", out, Op::Relu { a }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(DatError::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        check_finite("softmax input", ta.data())?;
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.requires_grad(a);
        self.push_checked("softmax", out, Op::Softmax { a, axis }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(DatError::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if !(eps > 0.0) {
            return Err(DatError::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push_checked("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| DatError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DatError::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DatError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// The half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(DatError::InvalidArgument(format!(
                "slice [{start}, {end}) on axis {axis} of shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = end - start;
        let rg = self.requires_grad(a);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Slice { a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(DatError::InvalidArgument("mean of empty tensor".into()));
        }
        let m = t.sum() / t.numel() as f64;
        let rg = self.requires_grad(a);
        self.push_checked("mean", Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DatError::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Dropout { a, mask }, rg))
    }

    fn check_loss_inputs(&self, name: &'static str, pred: Var, target: &[f64], weights: &[f64]) -> Result<()> {
        let n = self.value(pred).numel();
        if target.len() != n || weights.len() != n {
            return Err(DatError::shape(name, &[n], &[target.len(), weights.len()]));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(DatError::InvalidArgument(format!("{name}: mask weights must be finite and >= 0")));
        }
        Ok(())
    }

    /// Weighted mean squared error `Σ wᵢ(pᵢ − yᵢ)² / Σ wᵢ`. The target is a
    /// constant; a 0/1 weight vector acts as a frame mask.
    pub fn mse(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        self.check_loss_inputs("mse", pred, target, weights)?;
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(DatError::InvalidArgument("mse: mask selects no frames".into()));
        }
        let p = self.value(pred).data();
        let loss = p
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            / wsum;
        let rg = self.requires_grad(pred);
        let op = Op::Mse { pred, target: target.to_vec(), weights: weights.to_vec(), wsum };
        self.push_checked("mse", Tensor::scalar(loss), op, rg)
    }

    /// `1 − CCC(pred, target)` over the frames with nonzero weight, using
    /// weighted population moments.
    pub fn ccc_loss(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        self.check_loss_inputs("ccc_loss", pred, target, weights)?;
        if weights.iter().filter(|w| **w > 0.0).count() < 2 {
            return Err(DatError::InvalidArgument("ccc_loss needs at least 2 masked frames".into()));
        }
        let p = self.value(pred).data();
        let (mx, my, vx, vy, cxy) = weighted_moments(p, target, weights);
        let denom = vx + vy + (mx - my) * (mx - my);
        if denom <= 0.0 {
            return Err(DatError::Numeric("ccc_loss: degenerate inputs (zero denominator)".into()));
        }
        let loss = 1.0 - 2.0 * cxy / denom;
        let rg = self.requires_grad(pred);
        let op = Op::CccLoss { pred, target: target.to_vec(), weights: weights.to_vec() };
        self.push_checked("ccc_loss", Tensor::scalar(loss), op, rg)
    }

    // ---- backward ------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(DatError::Tape("backward already ran on this tape; reset it first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(DatError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            // Only leaf gradients are kept; intermediates are released as we go.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. leaf `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.as_ref()?.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Parameter gradients aligned with the store; unused parameters get zeros.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        if let Some(grads) = &self.grads {
            for (id, v) in &self.param_vars {
                if let Some(g) = &grads[v.0] {
                    out.get_mut(*id).data_mut().copy_from_slice(g);
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Lazily allocates the gradient buffer of `v`, then hands it to `f`.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = ta.numel() / k.max(1);
                    acc(grads, *a, &mut |ga| gemm_acc(rows, n, k, g, false, tb.data(), true, ga));
                    acc(grads, *b, &mut |gb| gemm_acc(k, rows, n, ta.data(), true, g, false, gb));
                } else {
                    let batches = ta.numel() / (m * k).max(1);
                    acc(grads, *a, &mut |ga| {
                        for t in 0..batches {
                            gemm_acc(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &tb.data()[t * k * n..(t + 1) * k * n],
                                true,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    });
                    acc(grads, *b, &mut |gb| {
                        for t in 0..batches {
                            gemm_acc(
                                k,
                                m,
                                n,
                                &ta.data()[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    });
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                acc(grads, *a, &mut |ga| gemm_acc(m, n, k, g, false, tb.data(), false, ga));
                acc(grads, *b, &mut |gb| gemm_acc(n, m, k, g, true, ta.data(), false, gb));
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self.nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let scalar_b = self.value(*b).rank() == 0 && self.value(*a).rank() != 0;
                acc(grads, *b, &mut |gb| {
                    if scalar_b {
                        gb[0] += sign * g.iter().sum::<f64>();
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scalar_b = tb.rank() == 0 && ta.rank() != 0;
                if scalar_b {
                    let y = tb.data()[0];
                    acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * y));
                    acc(grads, *b, &mut |gb| {
                        gb[0] += g.iter().zip(ta.data()).map(|(gi, x)| gi * x).sum::<f64>()
                    });
                } else {
                    acc(grads, *a, &mut |ga| {
                        for ((x, gi), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                            *x += gi * y;
                        }
                    });
                    acc(grads, *b, &mut |gb| {
                        for ((x, gi), y) in gb.iter_mut().zip(g).zip(ta.data()) {
                            *x += gi * y;
                        }
                    });
                }
            }
            Op::AddRow { a, bias } => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*bias).numel();
                acc(grads, *bias, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu { a, tanh } => {
                let ta = self.value(*a);
                acc(grads, *a, &mut |ga| {
                    for (((x, gi), v), t) in ga.iter_mut().zip(g).zip(ta.data()).zip(tanh) {
                        *x += gi * gelu_grad(*v, *t);
                    }
                });
            }
            Op::Relu { a } => {
                let ta = self.value(*a);
                acc(grads, *a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc(grads, *a, &mut |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let d = tg.numel();
                let rows = rstd.len();
                acc(grads, *x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(grads, *gamma, &mut |gg| {
                    for (gi, hi) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gi[j] * hi[j];
                        }
                    }
                });
                acc(grads, *beta, &mut |gb| {
                    for gi in g.chunks(d) {
                        gb.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    acc(grads, *v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let width = out.shape()[*axis] * inner;
                acc(grads, *a, &mut |ga| {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        ga[base..base + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum { a } => {
                acc(grads, *a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                acc(grads, *a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Dropout { a, mask } => {
                acc(grads, *a, &mut |ga| {
                    for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gi * m;
                    }
                });
            }
            Op::Mse { pred, target, weights, wsum } => {
                let p = self.value(*pred).data();
                acc(grads, *pred, &mut |gp| {
                    for j in 0..p.len() {
                        gp[j] += g[0] * 2.0 * weights[j] * (p[j] - target[j]) / wsum;
                    }
                });
            }
            Op::CccLoss { pred, target, weights } => {
                let p = self.value(*pred).data();
                let (mx, my, vx, vy, cxy) = weighted_moments(p, target, weights);
                let wsum: f64 = weights.iter().sum();
                let num = 2.0 * cxy;
                let den = vx + vy + (mx - my) * (mx - my);
                acc(grads, *pred, &mut |gp| {
                    for j in 0..p.len() {
                        let w = weights[j] / wsum;
                        let dnum = 2.0 * w * (target[j] - my);
                        let dden = 2.0 * w * (p[j] - mx) + 2.0 * w * (mx - my);
                        let dccc = (dnum * den - num * dden) / (den * den);
                        gp[j] -= g[0] * dccc;
                    }
                });
            }
        }
        Ok(())
    }
}

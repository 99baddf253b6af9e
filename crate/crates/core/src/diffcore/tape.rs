use std::fmt;

use super::{DiffError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward semantics of the straight-through operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// `round_st` rounds and `hardmax_st` emits a one-hot vector.
    #[default]
    Hard,
    /// `round_st` is the identity and `hardmax_st` is a softmax. Only used to
    /// check gradients against finite differences.
    Soft,
}

/// A differentiable operation defined outside this module.
///
/// `backward` must add the contribution of `grad_out` into `grads`, which is
/// aligned with `inputs`.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        grads: &mut [&mut Tensor],
    );
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    RoundSt(Var),
    /// Softmax probabilities at the logits drive the backward pass.
    HardmaxSt(Var, Vec<f64>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Reshape(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode computation record.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var, DiffError> {
        let first = vars.first().ok_or(DiffError::EmptyInput("add_n"))?;
        let mut out = self.value(*first).clone();
        for &v in &vars[1..] {
            let t = self.value(v);
            check_same("add_n", &out, t)?;
            out.add_assign(t);
        }
        Ok(self.push(out, Op::AddN(vars.to_vec())))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var, DiffError> {
        let (m, x) = (self.value(w), self.value(v));
        if m.shape().len() != 2 || x.shape().len() != 1 || m.shape()[1] != x.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                left: m.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        let out: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().zip(x.data()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, v)))
    }

    /// `v^T M` for `v[m]`, `M[m x n]`.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var, DiffError> {
        let (x, mat) = (self.value(v), self.value(m));
        if mat.shape().len() != 2 || x.shape().len() != 1 || mat.shape()[0] != x.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "vecmat",
                left: x.shape().to_vec(),
                right: mat.shape().to_vec(),
            });
        }
        let cols = mat.cols();
        let mut out = vec![0.0; cols];
        for (r, &xr) in x.data().iter().enumerate() {
            for (o, w) in out.iter_mut().zip(mat.row(r)) {
                *o += xr * w;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat(v, m)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(DiffError::ShapeMismatch {
                op: "dot",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn sigmoid(&mut self, z: Var) -> Var {
        let out = self.value(z).map(sigmoid);
        self.push(out, Op::Sigmoid(z))
    }

    pub fn tanh_act(&mut self, z: Var) -> Var {
        let out = self.value(z).map(f64::tanh);
        self.push(out, Op::Tanh(z))
    }

    /// Round half away from zero forward; identity backward.
    pub fn round_st(&mut self, z: Var) -> Var {
        let out = match self.mode {
            Mode::Hard => self.value(z).map(f64::round),
            Mode::Soft => self.value(z).clone(),
        };
        self.push(out, Op::RoundSt(z))
    }

    /// One-hot argmax forward; softmax Jacobian backward.
    pub fn hardmax_st(&mut self, logits: Var) -> Result<Var, DiffError> {
        let t = self.value(logits);
        if t.is_empty() {
            return Err(DiffError::EmptyInput("hardmax_st"));
        }
        let probs = softmax_slice(t.data());
        let out = match self.mode {
            Mode::Hard => {
                let mut one_hot = vec![0.0; t.len()];
                one_hot[argmax(t.data())] = 1.0;
                one_hot
            }
            Mode::Soft => probs.clone(),
        };
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::HardmaxSt(logits, probs)))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var, DiffError> {
        let t = self.value(logits);
        if t.is_empty() {
            return Err(DiffError::EmptyInput("softmax"));
        }
        let out = Tensor::new(t.shape().to_vec(), softmax_slice(t.data()))?;
        Ok(self.push(out, Op::Softmax(logits)))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, DiffError> {
        let t = self.value(logits);
        if target >= t.len() {
            return Err(DiffError::TargetOutOfRange {
                target,
                classes: t.len(),
            });
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        let probs = softmax_slice(t.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Flattening concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous flat range `[start, start + len)` as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if start + len > t.len() {
            return Err(DiffError::OutOfBounds {
                op: "slice",
                index: start + len,
                len: t.len(),
            });
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.shape().len() != 2 || i >= t.rows() {
            return Err(DiffError::OutOfBounds {
                op: "row",
                index: i,
                len: t.rows(),
            });
        }
        let out = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(out, Op::Row(a, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Records the result of an externally computed operation.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[Var],
        value: Tensor,
    ) -> Result<Var, DiffError> {
        for (i, a) in inputs.iter().enumerate() {
            if inputs[..i].contains(a) {
                return Err(DiffError::DuplicateInput(op.name()));
            }
        }
        Ok(self.push(value, Op::Custom(op, inputs.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(DiffError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones_like(root));

        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.slot(before, *a).add_assign(g);
                    self.slot(before, *b).add_assign(g);
                }
                Op::Sub(a, b) => {
                    self.slot(before, *a).add_assign(g);
                    for (s, d) in self.slot(before, *b).data_mut().iter_mut().zip(gd) {
                        *s -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    axpy(self.slot(before, *a).data_mut(), &da);
                    axpy(self.slot(before, *b).data_mut(), &db);
                }
                Op::AddN(vars) => {
                    for v in vars {
                        self.slot(before, *v).add_assign(g);
                    }
                }
                Op::Scale(a, f) => {
                    for (s, d) in self.slot(before, *a).data_mut().iter_mut().zip(gd) {
                        *s += f * d;
                    }
                }
                Op::MatVec(w, v) => {
                    let (wm, xv) = (self.value(*w), self.value(*v));
                    let cols = wm.cols();
                    let mut dx = vec![0.0; cols];
                    {
                        let gw = self.slot(before, *w);
                        for (r, &gr) in gd.iter().enumerate() {
                            let row = &mut gw.data_mut()[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                row[c] += gr * xv.data()[c];
                                dx[c] += gr * wm.data()[r * cols + c];
                            }
                        }
                    }
                    axpy(self.slot(before, *v).data_mut(), &dx);
                }
                Op::VecMat(v, m) => {
                    let (xv, mat) = (self.value(*v), self.value(*m));
                    let dx: Vec<f64> = (0..mat.rows())
                        .map(|r| mat.row(r).iter().zip(gd).map(|(w, g)| w * g).sum())
                        .collect();
                    {
                        let gm = self.slot(before, *m);
                        for (r, &xr) in xv.data().iter().enumerate() {
                            axpy_scaled(gm.row_mut(r), gd, xr);
                        }
                    }
                    axpy(self.slot(before, *v).data_mut(), &dx);
                }
                Op::Dot(a, b) => {
                    let g0 = gd[0];
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = vb.iter().map(|y| g0 * y).collect();
                    let db: Vec<f64> = va.iter().map(|x| g0 * x).collect();
                    axpy(self.slot(before, *a).data_mut(), &da);
                    axpy(self.slot(before, *b).data_mut(), &db);
                }
                Op::Sigmoid(z) => {
                    let out = node.value.data();
                    for ((s, d), y) in self.slot(before, *z).data_mut().iter_mut().zip(gd).zip(out) {
                        *s += d * y * (1.0 - y);
                    }
                }
                Op::Tanh(z) => {
                    let out = node.value.data();
                    for ((s, d), y) in self.slot(before, *z).data_mut().iter_mut().zip(gd).zip(out) {
                        *s += d * (1.0 - y * y);
                    }
                }
                Op::RoundSt(z) | Op::Reshape(z) => {
                    self.slot(before, *z).add_assign(g);
                }
                Op::HardmaxSt(z, probs) => {
                    let dz = softmax_vjp(probs, gd);
                    axpy(self.slot(before, *z).data_mut(), &dz);
                }
                Op::Softmax(z) => {
                    let dz = softmax_vjp(node.value.data(), gd);
                    axpy(self.slot(before, *z).data_mut(), &dz);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let g0 = gd[0];
                    let s = self.slot(before, *logits).data_mut();
                    for (k, p) in probs.iter().enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        s[k] += g0 * (p - onehot);
                    }
                }
                Op::Sum(a) => {
                    let g0 = gd[0];
                    for s in self.slot(before, *a).data_mut() {
                        *s += g0;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        axpy(self.slot(before, *p).data_mut(), &gd[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let s = self.slot(before, *a).data_mut();
                    axpy(&mut s[*start..*start + gd.len()], gd);
                }
                Op::Row(a, r) => {
                    let s = self.slot(before, *a).row_mut(*r);
                    axpy(s, gd);
                }
                Op::Custom(op, inputs) => {
                    for v in inputs {
                        self.slot(before, *v);
                    }
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let mut order: Vec<(usize, usize)> =
                        inputs.iter().enumerate().map(|(k, v)| (v.0, k)).collect();
                    order.sort_unstable();
                    let mut picked: Vec<Option<&mut Tensor>> =
                        (0..inputs.len()).map(|_| None).collect();
                    let mut rest: &mut [Option<Tensor>] = before;
                    let mut base = 0;
                    for &(want, k) in &order {
                        let (head, tail) = std::mem::take(&mut rest).split_at_mut(want - base + 1);
                        picked[k] = head[want - base].as_mut();
                        rest = tail;
                        base = want + 1;
                    }
                    let mut targets: Vec<&mut Tensor> =
                        picked.into_iter().map(|t| t.expect("slot initialised")).collect();
                    op.backward(&values, &node.value, g, &mut targets);
                }
            }
        }

        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if slot.is_none() && matches!(node.op, Op::Leaf) {
                *slot = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros_like(&self.nodes[v.0].value))
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy_scaled(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Vector-Jacobian product of softmax with output `probs`.
pub fn softmax_vjp(probs: &[f64], g: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(g).map(|(p, d)| p * d).sum();
    probs.iter().zip(g).map(|(p, d)| p * (d - inner)).collect()
}

/// Result of [`Tape::backward`].
///
/// Every leaf has an entry. Leaves the loss does not depend on get zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

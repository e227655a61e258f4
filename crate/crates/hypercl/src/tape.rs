//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! then performs a single reverse sweep over the recorded nodes. Node indices
//! are creation order, which is a valid topological order, so the sweep visits
//! consumers before producers and gradients accumulate additively when a value
//! feeds several consumers.
//!
//! Tapes are rebuilt on every forward pass. Training needs this: old-task
//! parameters are re-generated with fresh graphs each optimization step.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRowBroadcast { x: Var, bias: Var },
    Hadamard { a: Var, b: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Square { x: Var },
    Scale { x: Var, k: f64 },
    Sum { x: Var },
    ConcatRow { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSquaredDiff { x: Var, target: Vec<f64>, weights: Option<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient record produced by [`Tape::backward`].
///
/// Leaves registered via [`Tape::param`] are retrievable by name; any other
/// node by its [`Var`]. A trainable leaf the loss does not depend on gets no
/// entry, which callers must read as an all-zero gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.param_nodes
            .get(name)
            .and_then(|&i| self.grads[i].as_deref())
    }

    /// Gradient for a named parameter, densified to zeros when absent.
    pub fn param_or_zeros(&self, name: &str, len: usize) -> Vec<f64> {
        self.param(name)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn view2(data: &[f64], m: usize, n: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((m, n), data).expect("internal shape mismatch")
}

/// c += a . b  (accumulating matrix product; backs every gradient rule)
fn acc_mm(a: ArrayView2<f64>, b: ArrayView2<f64>, c: &mut [f64]) {
    let (m, n) = (a.nrows(), b.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("internal shape mismatch");
    general_mat_mul(1.0, &a, &b, 1.0, &mut cv);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf. Registering the same name twice returns
    /// the original node so gradient accumulation stays additive.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// C[i,j] = sum_k A[i,k] B[k,j]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        acc_mm(
            view2(self.value(a).data(), m, ka),
            view2(self.value(b).data(), kb, n),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Adds a 1 x K bias row to every row of a B x K matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let (brows, bcols) = self.value(bias).dims2()?;
        if brows != 1 || bcols != cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBroadcast { x, bias }, needs))
    }

    /// Hadamard (pointwise) product; shapes must match exactly.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "hadamard",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Hadamard { a, b }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| k * v, Op::Scale { x, k })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// Concatenates row vectors (1 x n_i each) into one 1 x sum(n_i) row.
    pub fn concat_row(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, _) = self.value(p).dims2()?;
            if r != 1 {
                return Err(Error::Shape {
                    op: "concat_row",
                    lhs: self.value(p).shape().to_vec(),
                    rhs: vec![1],
                });
            }
            data.extend_from_slice(self.value(p).data());
            needs |= self.needs(p);
        }
        let value = Tensor::row(data);
        Ok(self.push(
            value,
            Op::ConcatRow {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Columns [start, start+len) of a single-row tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = self.value(x).dims2()?;
        if r != 1 || start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::row(data), Op::SliceCols { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Mean over the batch of -log softmax(logits)[label], max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![b, k],
                rhs: vec![labels.len()],
            });
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index {
                    context: "softmax_cross_entropy label",
                    index: label,
                    bound: k,
                });
            }
            let r = &data[row * k..(row + 1) * k];
            let maxv = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in r {
                denom += (v - maxv).exp();
            }
            let log_denom = denom.ln() + maxv;
            for (j, &v) in r.iter().enumerate() {
                probs[row * k + j] = (v - log_denom).exp();
            }
            loss += log_denom - r[label];
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// sum_i w_i (x_i - target_i)^2 with the target (and weights) constant.
    pub fn weighted_squared_diff(
        &mut self,
        x: Var,
        target: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let n = self.value(x).numel();
        if target.len() != n || weights.map_or(false, |w| w.len() != n) {
            return Err(Error::Shape {
                op: "weighted_squared_diff",
                lhs: vec![n],
                rhs: vec![target.len()],
            });
        }
        let data = self.value(x).data();
        let mut total = 0.0;
        for i in 0..n {
            let d = data[i] - target[i];
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * d * d;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSquaredDiff {
                x,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// every node the loss depends on; nodes off the active subgraph are
    /// skipped entirely.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let param_nodes = self.params.iter().map(|(k, v)| (k.clone(), v.0)).collect();
        Ok(Gradients { grads, param_nodes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        // accumulate into a parent's gradient buffer, allocating on first touch
        macro_rules! buf {
            ($v:expr) => {{
                let len = self.value($v).numel();
                grads[$v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.needs(*a) {
                    // dA += dC . B^T
                    let da = buf!(*a);
                    acc_mm(view2(g, m, n), view2(self.value(*b).data(), k, n).t(), da);
                }
                if self.needs(*b) {
                    // dB += A^T . dC
                    let db = buf!(*b);
                    acc_mm(view2(self.value(*a).data(), m, k).t(), view2(g, m, n), db);
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if self.needs(*p) {
                        let d = buf!(*p);
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                let (rows, cols) = self.value(*x).dims2().unwrap();
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.needs(*bias) {
                    let d = buf!(*bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Hadamard { a, b } => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let d = buf!(*a);
                    for j in 0..g.len() {
                        d[j] += g[j] * bd[j];
                    }
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let d = buf!(*b);
                    for j in 0..g.len() {
                        d[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data();
                    let d = buf!(*x);
                    for j in 0..g.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data();
                    let d = buf!(*x);
                    for j in 0..g.len() {
                        d[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xin = self.value(*x).data();
                    let d = buf!(*x);
                    for j in 0..g.len() {
                        if xin[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let xin = self.value(*x).data();
                    let d = buf!(*x);
                    for j in 0..g.len() {
                        d[j] += g[j] * 2.0 * xin[j];
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for j in 0..g.len() {
                        d[j] += g[j] * k;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::ConcatRow { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        let d = buf!(p);
                        for j in 0..len {
                            d[j] += g[offset + j];
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (j, gv) in g.iter().enumerate() {
                        d[start + j] += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let d = buf!(*x);
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let (b, k) = self.value(*logits).dims2().unwrap();
                    let d = buf!(*logits);
                    let scale = g[0] / b as f64;
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[row * k + j] += scale * (probs[row * k + j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedSquaredDiff { x, target, weights } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let d = buf!(*x);
                    for j in 0..xd.len() {
                        let w = weights.as_ref().map_or(1.0, |w| w[j]);
                        d[j] += g[0] * 2.0 * w * (xd[j] - target[j]);
                    }
                }
            }
        }
    }
}

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, MatmulPlan};
use super::{ParamId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var, MatmulPlan),
    Relu(Var),
    Softmax { x: Var, axis: usize, log: bool },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    /// Mask already carries the inverted-dropout scale.
    Dropout(Var, Vec<Real>),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Built fresh per step. Parameters are borrowed from a [`ParamSet`]; using
/// the same parameter twice yields the same node, so its gradient is the sum
/// over all uses.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter set, in inference mode.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            rng: None,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            rng: None,
        }
    }

    /// Switches to training mode: dropout becomes active and draws from `rng`.
    pub fn training(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
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

    /// Sign (input > 0) of every ReLU input, in recording order. Two passes
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x)),
                _ => None,
            })
            .flat_map(|t| t.data.iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A constant leaf borrowed for the graph's lifetime, avoiding a copy.
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let params = self
            .params
            .expect("Graph::param called on a graph without a parameter set");
        let v = self.push(Cow::Borrowed(&params.get(id).value), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * factor).collect(),
        };
        self.push_op(out, Op::Scale(x, factor), &[x])
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = kernels::matmul_plan(ta.shape(), tb.shape())?;
        let data = kernels::matmul_forward(&plan, ta.data(), tb.data());
        let out = Tensor {
            shape: plan.out_shape.clone(),
            data,
        };
        Ok(self.push_op(out, Op::MatMul(a, b, plan), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push_op(out, Op::Relu(x), &[x])
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let data = kernels::softmax_forward(t.data(), t.shape(), axis, log);
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push_op(out, Op::Softmax { x, axis, log }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like that axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", t.shape(), &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: Real) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<Real> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep as f64 {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push_op(out, Op::Dropout(x, mask), &[x])
    }

    /// Rows of `table` ([vocab, dim]) selected by `ids`; the result has
    /// shape `ids_shape + [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", t.shape(), ids_shape));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("embedding id {bad} >= vocab {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let out = Tensor { shape, data };
        Ok(self.push_op(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor { shape, data };
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean")?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[o * len * inner + j * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as Real);
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let out = Tensor { shape, data };
        Ok(self.push_op(out, Op::Mean { x, axis }, &[x]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        self.check_axis(x, a1.max(a2), "transpose")?;
        if a1 == a2 {
            return Ok(x);
        }
        let t = self.value(x);
        let (data, shape) = kernels::transpose(t.data(), t.shape(), a1, a2);
        let out = Tensor { shape, data };
        Ok(self.push_op(out, Op::Transpose(x, a1, a2), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars,
        })
    }

    fn propagate(&self, node: &Node<'p>, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = grad.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = self.grad_buffer(*a);
                let mut gb = self.grad_buffer(*b);
                let (ad, bd) = (ta.data(), tb.data());
                kernels::binary_broadcast_backward(
                    ta.shape(),
                    tb.shape(),
                    node.value.shape(),
                    ga.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                    |o, ia, ib| {
                        if is_mul {
                            (g[o] * bd[ib], g[o] * ad[ia])
                        } else {
                            (g[o], g[o])
                        }
                    },
                );
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(x, f) => {
                let gx = Tensor {
                    shape: grad.shape.clone(),
                    data: g.iter().map(|v| v * f).collect(),
                };
                accumulate(grads, *x, Some(gx));
            }
            Op::MatMul(a, b, plan) => {
                let mut ga = self.grad_buffer(*a);
                let mut gb = self.grad_buffer(*b);
                kernels::matmul_backward(
                    plan,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    ga.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = Tensor {
                    shape: grad.shape.clone(),
                    data: g
                        .iter()
                        .zip(xv)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                };
                accumulate(grads, *x, Some(gx));
            }
            Op::Softmax { x, axis, log } => {
                let mut gx = Tensor::zeros(grad.shape());
                kernels::softmax_backward(
                    node.value.data(),
                    g,
                    grad.shape(),
                    *axis,
                    *log,
                    gx.data_mut(),
                );
                accumulate(grads, *x, Some(gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *grad.shape().last().unwrap();
                let gamma = self.value(*gain).data();
                let mut gx = self.grad_buffer(*x);
                let mut gg = self.grad_buffer(*gain);
                let mut gbias = self.grad_buffer(*bias);
                for (r, &rs) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..d {
                            gg.data[j] += gy[j] * xh[j];
                        }
                    }
                    if let Some(gb) = gbias.as_mut() {
                        for j in 0..d {
                            gb.data[j] += gy[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dxh: Vec<Real> = (0..d).map(|j| gy[j] * gamma[j]).collect();
                        let m1 = dxh.iter().sum::<Real>() / d as Real;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<Real>() / d as Real;
                        for j in 0..d {
                            gx.data[r * d + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gbias);
            }
            Op::Dropout(x, mask) => {
                let gx = Tensor {
                    shape: grad.shape.clone(),
                    data: g.iter().zip(mask).map(|(a, m)| a * m).collect(),
                };
                accumulate(grads, *x, Some(gx));
            }
            Op::Embedding { table, ids } => {
                if let Some(mut gt) = self.grad_buffer(*table) {
                    let dim = gt.shape()[1];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * dim..(row + 1) * dim];
                        for (t, s) in gt.data[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                            *t += s;
                        }
                    }
                    accumulate(grads, *table, Some(gt));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(grad.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(mut gv) = self.grad_buffer(v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for (t, s) in gv.data[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *t += s;
                            }
                        }
                        accumulate(grads, v, Some(gv));
                    }
                    offset += len;
                }
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx.data[o * len * inner + j * inner + i] =
                                g[o * inner + i] / len as Real;
                        }
                    }
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g[0]);
                accumulate(grads, *x, Some(gx));
            }
            Op::Transpose(x, a1, a2) => {
                let (data, shape) = kernels::transpose(g, grad.shape(), *a1, *a2);
                accumulate(grads, *x, Some(Tensor { shape, data }));
            }
            Op::Reshape(x) => {
                let gx = Tensor {
                    shape: self.shape(*x).to_vec(),
                    data: g.to_vec(),
                };
                accumulate(grads, *x, Some(gx));
            }
        }
    }

    fn grad_buffer(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .requires_grad
            .then(|| Tensor::zeros(self.shape(v)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Option<Tensor>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Parameters that took part in the forward pass, with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
    }
}

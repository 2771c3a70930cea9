use std::collections::BTreeMap;

use super::{check_temperature, Tensor, TensorError};

/// Identity of a trainable parameter across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax { x: Var, axis: usize, temperature: f64 },
    LogSoftmax(Var, usize),
    Activation(Var, Activation),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumers. Operations whose inputs are all constant are stored as plain
/// constants and contribute nothing to the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter. A missing entry means a zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or zeros of `shape` when absent.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales every gradient so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in self.grads.values_mut() {
                *g = g.scale(factor);
            }
        }
        norm
    }

    fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match self.grads.get_mut(&id) {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            None => {
                self.grads.insert(id, grad);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf(Some(id)), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf(None), false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf(None), false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]`, adding the bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 2 || bv.rank() != 1 || xv.cols() != bv.len() {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let n = bv.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(x).sum_axis(axis)?;
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    /// Softmax of `x / temperature` along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var, TensorError> {
        check_temperature("softmax_axis", temperature)?;
        let out = self.value(x).softmax(axis, temperature)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                axis,
                temperature,
            },
            &[x],
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(x).log_softmax(axis)?;
        Ok(self.push(out, Op::LogSoftmax(x, axis), &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Tanh => self.value(x).map(f64::tanh),
        };
        self.push(out, Op::Activation(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Row lookup into a `[n×e]` table, producing `[indices.len()×e]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Usage(format!(
                "gather_rows requires a matrix table, got shape {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), t.cols(), data)?;
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// Selects `x[i, indices[i]]` for every row of a matrix.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() != indices.len() {
            return Err(TensorError::Shape {
                op: "pick",
                lhs: xv.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for (i, &j) in indices.iter().enumerate() {
            if j >= xv.cols() {
                return Err(TensorError::Index {
                    op: "pick",
                    index: j,
                    len: xv.cols(),
                });
            }
            data.push(xv.get2(i, j));
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Pick(x, indices.to_vec()), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The tape is not consumed: calling this twice yields identical maps.
    pub fn backward(&self, loss: Var) -> Result<GradientMap, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = GradientMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf(Some(id)) => out.accumulate(*id, g),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.matmul(&self.value(*b).transpose()?)?;
                        add_grad(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).transpose()?.matmul(&g)?;
                        add_grad(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => add_grad(&mut grads, *a, g.transpose()?),
                Op::Add(a, b) => {
                    add_grad(&mut grads, *b, g.clone());
                    add_grad(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *b, g.scale(-1.0));
                    add_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::AddRowBias(x, bias) => {
                    add_grad(&mut grads, *bias, g.sum_axis(0)?);
                    add_grad(&mut grads, *x, g);
                }
                Op::Scale(x, c) => add_grad(&mut grads, *x, g.scale(*c)),
                Op::AddScalar(x) => add_grad(&mut grads, *x, g),
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item()?);
                    add_grad(&mut grads, *x, gx);
                }
                Op::SumAxis(x, axis) => {
                    let gx = broadcast_along(&g, self.value(*x).shape(), *axis);
                    add_grad(&mut grads, *x, gx);
                }
                Op::Softmax {
                    x,
                    axis,
                    temperature,
                } => {
                    // dx = y * (g - sum(g * y)) / T
                    let y = &node.value;
                    let gy = g.mul(y)?;
                    let dot = broadcast_along(&gy.sum_axis(*axis)?, y.shape(), *axis);
                    let gx = gy.sub(&dot.mul(y)?)?.scale(1.0 / temperature);
                    add_grad(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x, axis) => {
                    // dx = g - softmax * sum(g)
                    let p = node.value.map(f64::exp);
                    let total = broadcast_along(&g.sum_axis(*axis)?, p.shape(), *axis);
                    let gx = g.sub(&p.mul(&total)?)?;
                    add_grad(&mut grads, *x, gx);
                }
                Op::Activation(x, Activation::Relu) => {
                    let gx = g.zip_map(self.value(*x), "relu_backward", |g, v| {
                        if v > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    })?;
                    add_grad(&mut grads, *x, gx);
                }
                Op::Activation(x, Activation::Tanh) => {
                    let gx = g.zip_map(&node.value, "tanh_backward", |g, y| g * (1.0 - y * y))?;
                    add_grad(&mut grads, *x, gx);
                }
                Op::Concat(parts, axis) => {
                    let shape = g.shape().to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    for p in parts {
                        let pshape = self.value(*p).shape().to_vec();
                        let width = pshape[*axis] * inner;
                        if self.requires_grad(*p) {
                            let mut data = Vec::with_capacity(outer * width);
                            for o in 0..outer {
                                let start = o * shape[*axis] * inner + offset;
                                data.extend_from_slice(&g.data()[start..start + width]);
                            }
                            add_grad(&mut grads, *p, Tensor::new(pshape, data)?);
                        }
                        offset += width;
                    }
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    add_grad(&mut grads, *x, gx);
                }
                Op::GatherRows(table, indices) => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (t, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *t += v;
                        }
                    }
                    add_grad(&mut grads, *table, gt);
                }
                Op::Pick(x, indices) => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let cols = gx.cols();
                    for (i, &j) in indices.iter().enumerate() {
                        gx.data_mut()[i * cols + j] += g.data()[i];
                    }
                    add_grad(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Expands a tensor reduced along `axis` back to `shape` by repetition.
fn broadcast_along(reduced: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..n {
            for j in 0..inner {
                data[(o * n + i) * inner + j] = reduced.data()[o * inner + j];
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

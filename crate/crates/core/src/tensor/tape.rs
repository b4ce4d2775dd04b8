use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxis {
    /// One group per index of axis 1, pooled over every other axis (BatchNorm).
    Channel,
    /// One group per row of a `[batch, features]` matrix (LayerNorm).
    Row,
}

/// The fixed operation set.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind<S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// `x: [n, c_in, h, w]`, `k: [c_out, c_in, 3, 3]`, stride 1, zero padding 1.
    Conv2d3x3,
    Add,
    Sub,
    Mul,
    Scale(S),
    Relu,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Sum of all elements, shape `[1]`.
    Sum,
    Reshape(Vec<usize>),
    /// 2-D transpose.
    Transpose,
    /// `[n, c, h, w] -> [n, c, h/2, w/2]`, h and w even.
    MaxPool2x2,
    /// Row-wise log-softmax of a `[batch, classes]` matrix via log-sum-exp.
    LogSoftmax,
    /// `(x - mean) / sqrt(var + eps)` with biased variance per group.
    Standardize { axis: NormAxis, eps: S },
    /// Each row divided by `(||row||_2 + guard)`.
    L2NormalizeRows { guard: S },
}

impl<S> OpKind<S> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d3x3 => "conv2d_3x3",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::MaxPool2x2 => "max_pool2x2",
            OpKind::LogSoftmax => "softmax_logsumexp",
            OpKind::Standardize { .. } => "standardize",
            OpKind::L2NormalizeRows { .. } => "l2_normalize_rows",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Conv2d3x3 | OpKind::Add | OpKind::Sub | OpKind::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Saved<S> {
    None,
    /// Broadcast over axis 1 with this many trailing elements per channel.
    Broadcast { channels: usize, inner: usize },
    Argmax(Vec<usize>),
    Softmax(Vec<S>),
    Norm {
        xhat: Vec<S>,
        inv_std: Vec<S>,
        mean: Vec<S>,
        var: Vec<S>,
    },
    RowNorms(Vec<S>),
}

#[derive(Debug, Clone)]
struct Record<S> {
    kind: OpKind<S>,
    inputs: Vec<Var>,
    saved: Saved<S>,
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    needs_grad: bool,
    record: Option<Record<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, erroring when none was produced.
    pub fn of(&self, var: Var) -> Result<&[S]> {
        self.get(var).ok_or(Error::UnknownVar(var.0))
    }
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so the node list is already a topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; it participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, needs_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Per-group mean and biased variance saved by a `Standardize` node.
    pub fn norm_stats(&self, var: Var) -> Option<(&[S], &[S])> {
        match self.nodes.get(var.0)?.record.as_ref()?.saved {
            Saved::Norm {
                ref mean, ref var, ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, record: Option<Record<S>>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor<S>> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(var.0))
    }

    /// Execute `kind` on `inputs`, recording it for the backward pass.
    pub fn apply(&mut self, kind: OpKind<S>, inputs: &[Var]) -> Result<Var> {
        let op = kind.name();
        if inputs.len() != kind.arity() {
            return Err(Error::InvalidArgument(format!(
                "{op} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        for &v in inputs {
            if !self.check(v)?.is_finite() {
                return Err(Error::NonFinite { op });
            }
        }
        let (out, saved) = self.forward(&kind, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let record = Record {
            kind,
            inputs: inputs.to_vec(),
            saved,
        };
        Ok(self.push(out, needs_grad, Some(record)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d_3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        self.apply(OpKind::Conv2d3x3, &[x, k])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn max_pool2x2(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::MaxPool2x2, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn standardize(&mut self, a: Var, axis: NormAxis, eps: S) -> Result<Var> {
        self.apply(OpKind::Standardize { axis, eps }, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var, guard: S) -> Result<Var> {
        self.apply(OpKind::L2NormalizeRows { guard }, &[a])
    }

    fn forward(&self, kind: &OpKind<S>, inputs: &[Var]) -> Result<(Tensor<S>, Saved<S>)> {
        let op = kind.name();
        let a = &self.nodes[inputs[0].0].value;
        match kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
                let mut out = vec![S::zero(); m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Ok((Tensor::raw(vec![m, n], out), Saved::None))
            }
            OpKind::Conv2d3x3 => {
                let k = &self.nodes[inputs[1].0].value;
                let d = conv_dims(a.shape(), k.shape())?;
                let mut out = vec![S::zero(); d.n * d.c_out * d.h * d.w];
                conv_forward(a.data(), k.data(), &mut out, &d);
                Ok((
                    Tensor::raw(vec![d.n, d.c_out, d.h, d.w], out),
                    Saved::None,
                ))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                let bc = broadcast_layout(op, a.shape(), b.shape())?;
                let f: fn(S, S) -> S = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out: Vec<S> = match bc {
                    None => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                    Some((channels, inner)) => a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data()[(i / inner) % channels]))
                        .collect(),
                };
                let saved = match bc {
                    None => Saved::None,
                    Some((channels, inner)) => Saved::Broadcast { channels, inner },
                };
                Ok((Tensor::raw(a.shape().to_vec(), out), saved))
            }
            OpKind::Scale(c) => Ok((
                Tensor::raw(a.shape().to_vec(), a.data().iter().map(|&x| x * *c).collect()),
                Saved::None,
            )),
            OpKind::Relu => Ok((
                Tensor::raw(
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .map(|&x| if x > S::zero() { x } else { S::zero() })
                        .collect(),
                ),
                Saved::None,
            )),
            OpKind::Sum => Ok((Tensor::scalar(ordered_sum(a.data())), Saved::None)),
            OpKind::Mean => {
                let n = S::of(a.len() as f64);
                Ok((Tensor::scalar(ordered_sum(a.data()) / n), Saved::None))
            }
            OpKind::Reshape(shape) => {
                if shape.is_empty() || shape.contains(&0) || numel(shape) != a.len() {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: a.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Ok((Tensor::raw(shape.clone(), a.data().to_vec()), Saved::None))
            }
            OpKind::Transpose => {
                let (r, c) = rank2(op, a.shape())?;
                let mut out = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = a.data()[i * c + j];
                    }
                }
                Ok((Tensor::raw(vec![c, r], out), Saved::None))
            }
            OpKind::MaxPool2x2 => {
                let s = a.shape();
                if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
                    return Err(Error::InvalidShape {
                        op,
                        shape: s.to_vec(),
                        reason: "expected [n, c, h, w] with even h and w".into(),
                    });
                }
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(planes * oh * ow);
                let mut arg = Vec::with_capacity(planes * oh * ow);
                let x = a.data();
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = p * h * w + 2 * i * w + 2 * j;
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            out.push(x[best]);
                            arg.push(best);
                        }
                    }
                }
                Ok((
                    Tensor::raw(vec![s[0], s[1], oh, ow], out),
                    Saved::Argmax(arg),
                ))
            }
            OpKind::LogSoftmax => {
                let (r, c) = rank2(op, a.shape())?;
                let x = a.data();
                let mut out = vec![S::zero(); r * c];
                let mut soft = vec![S::zero(); r * c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for &v in row {
                        z = z + (v - mx).exp();
                    }
                    let lse = mx + z.ln();
                    for j in 0..c {
                        out[i * c + j] = row[j] - lse;
                        soft[i * c + j] = out[i * c + j].exp();
                    }
                }
                Ok((Tensor::raw(vec![r, c], out), Saved::Softmax(soft)))
            }
            OpKind::Standardize { axis, eps } => standardize_forward(op, a, *axis, *eps),
            OpKind::L2NormalizeRows { guard } => {
                let (r, c) = rank2(op, a.shape())?;
                let x = a.data();
                let mut out = vec![S::zero(); r * c];
                let mut norms = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let n = crate::scalar::l2_norm(row);
                    let d = n + *guard;
                    for j in 0..c {
                        out[i * c + j] = row[j] / d;
                    }
                    norms.push(n);
                }
                Ok((Tensor::raw(vec![r, c], out), Saved::RowNorms(norms)))
            }
        }
    }

    /// Reverse pass from a scalar `loss`. Every leaf that requires grad gets a
    /// gradient (zeros when unreachable); leaf grad slots are filled as well.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        let root = self.check(loss)?;
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(record) = self.nodes[id].record.as_ref() else {
                continue;
            };
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let wants: Vec<bool> = record
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].needs_grad)
                .collect();
            let contribs = self.backward_node(id, record, &dy, &wants);
            for (input, contrib) in record.inputs.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Keep the root's seed so callers can inspect it.
            if id == loss.0 {
                grads[id] = Some(dy);
            }
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.record.is_none() && node.needs_grad {
                let g = grads[id]
                    .get_or_insert_with(|| vec![S::zero(); node.value.len()])
                    .clone();
                node.value.grad = Some(g);
            } else if node.record.is_some() {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        id: usize,
        record: &Record<S>,
        dy: &[S],
        wants: &[bool],
    ) -> Vec<Option<Vec<S>>> {
        let input = |i: usize| &self.nodes[record.inputs[i].0].value;
        let out = &self.nodes[id].value;
        match &record.kind {
            OpKind::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = wants[0].then(|| {
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc = acc + dy[i * n + j] * b.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    da
                });
                let db = wants[1].then(|| {
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                row[j] = row[j] + av * dy[i * n + j];
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Conv2d3x3 => {
                let (x, k) = (input(0), input(1));
                let d = conv_dims(x.shape(), k.shape()).expect("validated in forward");
                let dx = wants[0].then(|| {
                    let mut dx = vec![S::zero(); x.len()];
                    conv_backward_input(dy, k.data(), &mut dx, &d);
                    dx
                });
                let dk = wants[1].then(|| {
                    let mut dk = vec![S::zero(); k.len()];
                    conv_backward_kernel(dy, x.data(), &mut dk, &d);
                    dk
                });
                vec![dx, dk]
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (input(0), input(1));
                let bc = match record.saved {
                    Saved::Broadcast { channels, inner } => Some((channels, inner)),
                    _ => None,
                };
                let b_at = |i: usize| match bc {
                    None => b.data()[i],
                    Some((c, inner)) => b.data()[(i / inner) % c],
                };
                let da = wants[0].then(|| match record.kind {
                    OpKind::Mul => dy.iter().enumerate().map(|(i, &g)| g * b_at(i)).collect(),
                    _ => dy.to_vec(),
                });
                let db = wants[1].then(|| {
                    let elem: Vec<S> = match record.kind {
                        OpKind::Add => dy.to_vec(),
                        OpKind::Sub => dy.iter().map(|&g| -g).collect(),
                        _ => dy.iter().zip(a.data()).map(|(&g, &x)| g * x).collect(),
                    };
                    match bc {
                        None => elem,
                        Some((c, inner)) => {
                            let mut acc = vec![S::zero(); c];
                            for (i, v) in elem.into_iter().enumerate() {
                                let ch = (i / inner) % c;
                                acc[ch] = acc[ch] + v;
                            }
                            acc
                        }
                    }
                });
                vec![da, db]
            }
            OpKind::Scale(c) => vec![Some(dy.iter().map(|&g| g * *c).collect())],
            OpKind::Relu => vec![Some(
                dy.iter()
                    .zip(input(0).data())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect(),
            )],
            OpKind::Sum => vec![Some(vec![dy[0]; input(0).len()])],
            OpKind::Mean => {
                let n = input(0).len();
                vec![Some(vec![dy[0] / S::of(n as f64); n])]
            }
            OpKind::Reshape(_) => vec![Some(dy.to_vec())],
            OpKind::Transpose => {
                // out is [c, r]; dx[i, j] = dy[j, i]
                let (c, r) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                vec![Some(dx)]
            }
            OpKind::MaxPool2x2 => {
                let Saved::Argmax(arg) = &record.saved else {
                    unreachable!()
                };
                let mut dx = vec![S::zero(); input(0).len()];
                for (&src, &g) in arg.iter().zip(dy) {
                    dx[src] = dx[src] + g;
                }
                vec![Some(dx)]
            }
            OpKind::LogSoftmax => {
                let Saved::Softmax(soft) = &record.saved else {
                    unreachable!()
                };
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let total = ordered_sum(&dy[i * c..(i + 1) * c]);
                    for j in 0..c {
                        dx[i * c + j] = dy[i * c + j] - soft[i * c + j] * total;
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Standardize { axis, .. } => {
                let Saved::Norm { xhat, inv_std, .. } = &record.saved else {
                    unreachable!()
                };
                let groups = group_index(input(0).shape(), *axis);
                let g = inv_std.len();
                let mut sum_dy = vec![S::zero(); g];
                let mut sum_dy_xhat = vec![S::zero(); g];
                let mut count = vec![0usize; g];
                for (i, gi) in groups.clone().enumerate() {
                    sum_dy[gi] = sum_dy[gi] + dy[i];
                    sum_dy_xhat[gi] = sum_dy_xhat[gi] + dy[i] * xhat[i];
                    count[gi] += 1;
                }
                let dx = groups
                    .enumerate()
                    .map(|(i, gi)| {
                        let n = S::of(count[gi] as f64);
                        inv_std[gi] * (dy[i] - sum_dy[gi] / n - xhat[i] * sum_dy_xhat[gi] / n)
                    })
                    .collect();
                vec![Some(dx)]
            }
            OpKind::L2NormalizeRows { guard } => {
                let Saved::RowNorms(norms) = &record.saved else {
                    unreachable!()
                };
                let x = input(0).data();
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let n = norms[i];
                    let d = n + *guard;
                    let row = i * c..(i + 1) * c;
                    let mut dot = S::zero();
                    for j in row.clone() {
                        dot = dot + dy[j] * x[j];
                    }
                    for j in row {
                        dx[j] = if n > S::zero() {
                            dy[j] / d - x[j] * dot / (n * d * d)
                        } else {
                            dy[j] / d
                        };
                    }
                }
                vec![Some(dx)]
            }
        }
    }
}

fn ordered_sum<S: Scalar>(v: &[S]) -> S {
    let mut acc = S::zero();
    for &x in v {
        acc = acc + x;
    }
    acc
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected a rank-2 tensor".into(),
        }),
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    }
}

/// `None` for identical shapes, `Some((channels, inner))` for the axis-1
/// broadcast of a `[C]` right operand.
fn broadcast_layout(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Option<(usize, usize)>> {
    if a == b {
        return Ok(None);
    }
    if b.len() == 1 && a.len() >= 2 && a[1] == b[0] {
        return Ok(Some((b[0], numel(&a[2..]))));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

fn conv_dims(x: &[usize], k: &[usize]) -> Result<ConvDims> {
    match (x, k) {
        ([n, c_in, h, w], [c_out, c_in2, 3, 3]) if c_in == c_in2 => Ok(ConvDims {
            n: *n,
            c_in: *c_in,
            c_out: *c_out,
            h: *h,
            w: *w,
        }),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d_3x3",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        }),
    }
}

/// Valid output range along one axis for kernel offset `off` in {0,1,2}.
#[inline]
fn tap_range(off: usize, len: usize) -> std::ops::Range<usize> {
    match off {
        0 => 1..len,
        1 => 0..len,
        _ => 0..len.saturating_sub(1),
    }
}

fn conv_forward<S: Scalar>(x: &[S], k: &[S], out: &mut [S], d: &ConvDims) {
    let plane = d.h * d.w;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * plane..][..plane];
            for ci in 0..d.c_in {
                let xin = &x[(n * d.c_in + ci) * plane..][..plane];
                for kh in 0..3 {
                    for kw in 0..3 {
                        let kv = k[((co * d.c_in + ci) * 3 + kh) * 3 + kw];
                        for i in tap_range(kh, d.h) {
                            let si = i + kh - 1;
                            for j in tap_range(kw, d.w) {
                                o[i * d.w + j] = o[i * d.w + j] + kv * xin[si * d.w + j + kw - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<S: Scalar>(dy: &[S], k: &[S], dx: &mut [S], d: &ConvDims) {
    let plane = d.h * d.w;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = &dy[(n * d.c_out + co) * plane..][..plane];
            for ci in 0..d.c_in {
                let dxi = &mut dx[(n * d.c_in + ci) * plane..][..plane];
                for kh in 0..3 {
                    for kw in 0..3 {
                        let kv = k[((co * d.c_in + ci) * 3 + kh) * 3 + kw];
                        for i in tap_range(kh, d.h) {
                            let si = i + kh - 1;
                            for j in tap_range(kw, d.w) {
                                let t = si * d.w + j + kw - 1;
                                dxi[t] = dxi[t] + kv * g[i * d.w + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel<S: Scalar>(dy: &[S], x: &[S], dk: &mut [S], d: &ConvDims) {
    let plane = d.h * d.w;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = &dy[(n * d.c_out + co) * plane..][..plane];
            for ci in 0..d.c_in {
                let xin = &x[(n * d.c_in + ci) * plane..][..plane];
                for kh in 0..3 {
                    for kw in 0..3 {
                        let mut acc = S::zero();
                        for i in tap_range(kh, d.h) {
                            let si = i + kh - 1;
                            for j in tap_range(kw, d.w) {
                                acc = acc + g[i * d.w + j] * xin[si * d.w + j + kw - 1];
                            }
                        }
                        let idx = ((co * d.c_in + ci) * 3 + kh) * 3 + kw;
                        dk[idx] = dk[idx] + acc;
                    }
                }
            }
        }
    }
}

/// Group id of every flat element, in flat order.
fn group_index(shape: &[usize], axis: NormAxis) -> impl Iterator<Item = usize> + Clone {
    let total = numel(shape);
    let (div, modulo) = match axis {
        NormAxis::Channel => (numel(&shape[2..]), shape[1]),
        NormAxis::Row => (shape[1], usize::MAX),
    };
    (0..total).map(move |i| (i / div) % modulo)
}

fn standardize_forward<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    axis: NormAxis,
    eps: S,
) -> Result<(Tensor<S>, Saved<S>)> {
    let shape = a.shape();
    let groups = match axis {
        NormAxis::Channel if shape.len() >= 2 => shape[1],
        NormAxis::Row if shape.len() == 2 => shape[0],
        _ => {
            return Err(Error::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "channel axis needs rank >= 2, row axis needs rank 2".into(),
            })
        }
    };
    if eps < S::zero() {
        return Err(Error::InvalidArgument(format!("{op}: eps must be >= 0")));
    }
    let x = a.data();
    let mut mean = vec![S::zero(); groups];
    let mut count = vec![0usize; groups];
    for (i, g) in group_index(shape, axis).enumerate() {
        mean[g] = mean[g] + x[i];
        count[g] += 1;
    }
    for g in 0..groups {
        mean[g] = mean[g] / S::of(count[g] as f64);
    }
    let mut var = vec![S::zero(); groups];
    for (i, g) in group_index(shape, axis).enumerate() {
        let c = x[i] - mean[g];
        var[g] = var[g] + c * c;
    }
    for g in 0..groups {
        var[g] = var[g] / S::of(count[g] as f64);
    }
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    if !all_finite(&inv_std) {
        return Err(Error::NonFinite { op });
    }
    let xhat: Vec<S> = group_index(shape, axis)
        .enumerate()
        .map(|(i, g)| (x[i] - mean[g]) * inv_std[g])
        .collect();
    Ok((
        Tensor::raw(shape.to_vec(), xhat.clone()),
        Saved::Norm {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

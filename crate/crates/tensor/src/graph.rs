//! Tape of recorded operations and the reverse sweep over it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{Conv2dSpec, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::kernels::{self, MatmulPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    /// Position of the producing node on its tape.
    pub fn index(self) -> usize {
        self.index
    }
}

/// Operation families, used for FLOP accounting and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Gelu,
    Relu,
    Reshape,
    Permute,
    Concat,
    Sum,
    Mean,
    SumAxis,
    MatMul,
    Softmax,
    LayerNorm,
    Conv2d,
    CrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MatMul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::CrossEntropy => "cross_entropy",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        const ALL: [OpKind; 20] = [
            OpKind::Leaf,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Div,
            OpKind::Scale,
            OpKind::AddScalar,
            OpKind::Gelu,
            OpKind::Relu,
            OpKind::Reshape,
            OpKind::Permute,
            OpKind::Concat,
            OpKind::Sum,
            OpKind::Mean,
            OpKind::SumAxis,
            OpKind::MatMul,
            OpKind::Softmax,
            OpKind::LayerNorm,
            OpKind::Conv2d,
            OpKind::CrossEntropy,
        ];
        ALL.into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| TensorError::Parameter(format!("unknown op kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary),
    Scale(T),
    AddScalar,
    Gelu,
    Relu,
    Reshape,
    Permute(Vec<usize>),
    Concat(usize),
    Sum,
    Mean,
    SumAxis(usize),
    MatMul(MatmulPlan),
    Softmax(usize),
    LayerNorm { means: Vec<T>, rstds: Vec<T> },
    Conv2d(ConvGeometry),
    CrossEntropy { labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(Binary::Add) => OpKind::Add,
            Op::Binary(Binary::Sub) => OpKind::Sub,
            Op::Binary(Binary::Mul) => OpKind::Mul,
            Op::Binary(Binary::Div) => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Gelu => OpKind::Gelu,
            Op::Relu => OpKind::Relu,
            Op::Reshape => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::Concat(_) => OpKind::Concat,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumAxis(_) => OpKind::SumAxis,
            Op::MatMul(_) => OpKind::MatMul,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Computation tape.
///
/// Every operation appends one node whose inputs precede it, so the node list
/// is always in topological order. [`Graph::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    flops: BTreeMap<OpKind, u64>,
    fault: Option<(OpKind, T)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            flops: BTreeMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("variable from another graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Total forward FLOPs recorded since construction or the last reset.
    pub fn flops(&self) -> u64 {
        self.flops.values().sum()
    }

    pub fn flops_of(&self, kind: OpKind) -> u64 {
        self.flops.get(&kind).copied().unwrap_or(0)
    }

    pub fn reset_flops(&mut self) {
        self.flops.clear();
    }

    /// Scales the input gradients produced by every `kind` node during
    /// [`Graph::backward`]. Exists so gradient-check harnesses can prove they
    /// catch a broken derivative rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, T::from_f64(factor)));
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Contract(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>, flops: u64) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(TensorError::Numeric(format!(
                "{kind} produced a non-finite value (shape {:?})",
                value.shape()
            )));
        }
        *self.flops.entry(kind).or_default() += flops;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !ta.shape().ends_with(tb.shape()) {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(TensorError::shapes(name, ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let nb = bd.len();
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = ta
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let n = value.numel() as u64;
        self.push(Op::Binary(kind), vec![ia, ib], value, n)
    }

    /// Elementwise `a + b`; `b` may have a trailing sub-shape of `a` and is then
    /// broadcast over the leading axes. The same rule holds for `sub`, `mul`, `div`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T, flops_per: u64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        let n = value.numel() as u64 * flops_per;
        self.push(op, vec![ia], value, n)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(Op::Scale(c), a, |x| x * c, 1)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(Op::AddScalar, a, |x| x + c, 1)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu, a, kernels::gelu, 8)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| x.max(T::zero()), 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.reshape(shape.to_vec())?;
        self.push(Op::Reshape, vec![ia], value, 0)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.permute(perm)?;
        self.push(Op::Permute(perm.to_vec()), vec![ia], value, 0)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::dim("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(TensorError::shapes("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(Op::Concat(axis), idx, value, 0)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (value, n) = (Tensor::scalar(t.sum()), t.numel() as u64);
        self.push(Op::Sum, vec![ia], value, n)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (value, n) = (Tensor::scalar(t.mean()), t.numel() as u64);
        self.push(Op::Mean, vec![ia], value, n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(TensorError::dim(
                "sum_axis",
                format!("axis {axis} for {:?}", t.shape()),
            ));
        }
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let x = t.data();
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..][..inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let n = t.numel() as u64;
        self.push(Op::SumAxis(axis), vec![ia], Tensor::new(shape, out)?, n)
    }

    /// Matrix product of rank-2 or batched rank-3 operands; a batch of 1 broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.forward(ta.data(), tb.data(), &mut out);
        let value = Tensor::new(plan.out_shape(), out)?;
        self.push(Op::MatMul(plan), vec![ia, ib], value, plan.flops())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.softmax(axis)?;
        let n = value.numel() as u64 * 5;
        self.push(Op::Softmax(axis), vec![ia], value, n)
    }

    /// Normalises over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (tx, tg, tb) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must match last axis of {:?}",
                    tg.shape(),
                    tb.shape(),
                    tx.shape()
                ),
            ));
        }
        let mut out = vec![T::zero(); tx.numel()];
        let (means, rstds) =
            kernels::layer_norm(tx.data(), tg.data(), tb.data(), T::from_f64(eps), &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let n = value.numel() as u64 * 8;
        self.push(Op::LayerNorm { means, rstds }, vec![ix, ig, ib], value, n)
    }

    /// NHWC convolution with zero padding; see [`Conv2dSpec`] for the weight layout.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ibias = bias.map(|b| self.check(b)).transpose()?;
        let tx = &self.nodes[ix].value;
        let tw = &self.nodes[iw].value;
        let tb = ibias.map(|i| &self.nodes[i].value);
        let geom = spec.geometry(tx.shape(), tw.shape(), tb.map(|b| b.shape()))?;
        let mut out = vec![T::zero(); geom.out_numel()];
        kernels::conv2d_forward(&geom, tx.data(), tw.data(), tb.map(|b| b.data()), &mut out);
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut inputs = vec![ix, iw];
        inputs.extend(ibias);
        self.push(Op::Conv2d(geom), inputs, value, geom.flops())
    }

    /// Mean negative log-likelihood of `labels` under a softmax over the last
    /// axis of `logits`. One label per leading position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        let k = *t.shape().last().unwrap_or(&0);
        let rows = t.numel() / k.max(1);
        if t.rank() < 2 || labels.len() != rows {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), t.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![T::zero(); t.numel()];
        kernels::softmax(t.shape(), t.rank() - 1, t.data(), &mut probs);
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &t.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
        }
        let value = Tensor::scalar(total / T::from_usize(rows));
        let n = t.numel() as u64 * 5;
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![il],
            value,
            n,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every parameter leaf on the tape. Parameters the
    /// loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(li + 1, || None);
        grads[li] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let mut contributions = self.node_backward(node, &g, &wants);
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for c in contributions.iter_mut().flatten() {
                        c.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (&j, c) in node.inputs.iter().zip(contributions) {
                let Some(c) = c else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.entry(i)
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let zeros = |k: usize| vec![T::zero(); input(k).numel()];
        let mut res: Vec<Option<Vec<T>>> = vec![None; node.inputs.len()];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind) => {
                let a = input(0).data();
                let b = input(1).data();
                let nb = b.len();
                if wants[0] {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &v)| v * b[i % nb]).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, &v)| v / b[i % nb]).collect(),
                    };
                    res[0] = Some(da);
                }
                if wants[1] {
                    let mut db = vec![T::zero(); nb];
                    for (i, &v) in g.iter().enumerate() {
                        let j = i % nb;
                        db[j] += match kind {
                            Binary::Add => v,
                            Binary::Sub => -v,
                            Binary::Mul => v * a[i],
                            Binary::Div => -v * a[i] / (b[j] * b[j]),
                        };
                    }
                    res[1] = Some(db);
                }
            }
            Op::Scale(c) => res[0] = Some(g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar | Op::Reshape => res[0] = Some(g.to_vec()),
            Op::Gelu => {
                let x = input(0).data();
                res[0] = Some(
                    g.iter()
                        .zip(x)
                        .map(|(&v, &x)| v * kernels::gelu_grad(x))
                        .collect(),
                );
            }
            Op::Relu => {
                let x = input(0).data();
                res[0] = Some(
                    g.iter()
                        .zip(x)
                        .map(|(&v, &x)| if x > T::zero() { v } else { T::zero() })
                        .collect(),
                );
            }
            Op::Permute(perm) => {
                let inv = kernels::inverse_perm(perm);
                let (_, d) = kernels::permute(node.value.shape(), g, &inv);
                res[0] = Some(d);
            }
            Op::Concat(axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let len = input(k).shape()[*axis];
                    if wants[k] {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + len * inner]);
                        }
                        res[k] = Some(d);
                    }
                    offset += len;
                }
            }
            Op::Sum => res[0] = Some(vec![g[0]; input(0).numel()]),
            Op::Mean => {
                let n = input(0).numel();
                res[0] = Some(vec![g[0] / T::from_usize(n); n]);
            }
            Op::SumAxis(axis) => {
                let (outer, len, inner) = kernels::axis_split(input(0).shape(), *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res[0] = Some(d);
            }
            Op::MatMul(plan) => {
                let mut da = wants[0].then(|| zeros(0));
                let mut db = wants[1].then(|| zeros(1));
                plan.backward(
                    input(0).data(),
                    input(1).data(),
                    g,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res[0] = da;
                res[1] = db;
            }
            Op::Softmax(axis) => {
                let mut dx = zeros(0);
                kernels::softmax_backward(node.value.shape(), *axis, node.value.data(), g, &mut dx);
                res[0] = Some(dx);
            }
            Op::LayerNorm { means, rstds } => {
                let mut dx = wants[0].then(|| zeros(0));
                let mut dg = wants[1].then(|| zeros(1));
                let mut db = wants[2].then(|| zeros(2));
                kernels::layer_norm_backward(
                    input(0).data(),
                    input(1).data(),
                    means,
                    rstds,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res = vec![dx, dg, db];
            }
            Op::Conv2d(geom) => {
                let mut dx = wants[0].then(|| zeros(0));
                let mut dw = wants[1].then(|| zeros(1));
                let mut db = (node.inputs.len() > 2 && wants[2]).then(|| zeros(2));
                kernels::conv2d_backward(
                    geom,
                    input(0).data(),
                    input(1).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res[0] = dx;
                res[1] = dw;
                if node.inputs.len() > 2 {
                    res[2] = db;
                }
            }
            Op::CrossEntropy { labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len());
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                res[0] = Some(d);
            }
        }
        res
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    graph: u64,
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter leaf; `None` for constants and derived values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v).ok_or_else(|| {
            TensorError::Contract(format!("no gradient recorded for variable {}", v.index))
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -1.0, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn foreign_loss_is_a_contract_error() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g2.param(t(&[1], &[1.0]));
        let s = g2.sum(x).unwrap();
        g1.param(t(&[1], &[1.0]));
        assert!(matches!(g1.backward(s), Err(TensorError::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[0.0; 6]));
        let b = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1.0]));
        let z = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(a, z), Err(TensorError::Numeric(_))));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.softmax(x, 1).unwrap();
        let z = g.gelu(y).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn op_kind_names_round_trip() {
        for name in ["matmul", "softmax", "gelu", "conv2d", "layer_norm"] {
            let k: OpKind = name.parse().unwrap();
            assert_eq!(k.to_string(), name);
        }
    }

    #[test]
    fn flops_are_counted_per_kind() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([4, 3]));
        let b = g.constant(Tensor::zeros([3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.flops_of(OpKind::MatMul), 2 * 4 * 3 * 5);
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of that output with respect to every node.
//! Parameter leaves remember their [`ParamId`] so gradients can be pushed
//! back into a [`ParamStore`].

use std::collections::BTreeMap;
use std::fmt;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_layout, standardize_with_stats, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for diagnostics, cost accounting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    TransposeLast,
    Permute,
    Reshape,
    Sigmoid,
    Tanh,
    Gelu,
    Exp,
    Clamp,
    Softmax,
    LayerNorm,
    Standardize,
    Mean,
    SumAll,
    MeanAll,
    Concat,
    Slice,
    GatherRows,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::TransposeLast,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Clamp,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Standardize,
        OpKind::Mean,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::TransposeLast => "transpose",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Clamp => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Standardize => "standardize",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean_all",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    TransposeLast(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Standardize {
        x: Var,
        axis: usize,
        eps: T,
        centered: Vec<T>,
        sigma: Vec<T>,
    },
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::TransposeLast(..) => OpKind::TransposeLast,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Standardize { .. } => OpKind::Standardize,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::GatherRows(..) => OpKind::GatherRows,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a differentiable computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    scope: Option<&'static str>,
    costs: BTreeMap<&'static str, u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every graph node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    /// Sum of the gradients of every leaf bound to `id`.
    pub fn param(&self, id: ParamId, shape: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(shape.to_vec());
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                for (a, &b) in out.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        out
    }

    /// Adds parameter gradients into the store's accumulators (trainable only).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every element of `out` (row-major), the linear index of the element
/// of a tensor shaped `src` that broadcasts onto it.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if src == out {
        return (0..numel).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..numel {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (value, deriv)
}

/// Logistic function, kept strictly inside (0, 1) even where it would round to an endpoint.
fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(top)
}

struct MatMulDims {
    batch: usize,
    b_batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    // b's batch dims must be a trailing suffix of a's.
    if k != k2 || b_batch.len() > a_batch.len() || a_batch[a_batch.len() - b_batch.len()..] != *b_batch {
        return Err(err());
    }
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatMulDims {
            batch: a_batch.iter().product(),
            b_batch: b_batch.iter().product(),
            m,
            k,
            n,
        },
        out,
    ))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
            scope: None,
            costs: BTreeMap::new(),
        }
    }

    /// Perturbs the backward rule of every `kind` node. Diagnostic hook for
    /// verifying that gradient checks detect a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Attributes the cost of subsequent operations to `scope` until cleared.
    pub fn set_cost_scope(&mut self, scope: Option<&'static str>) {
        self.scope = scope;
    }

    pub fn cost_scope(&self) -> Option<&'static str> {
        self.scope
    }

    /// Accumulated floating-point operation counts per cost scope.
    pub fn costs(&self) -> &BTreeMap<&'static str, u64> {
        &self.costs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, cost: u64) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        if let Some(scope) = self.scope {
            *self.costs.entry(scope).or_insert(0) += cost;
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::TransposeLast(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Slice(a, ..)
            | Op::GatherRows(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Standardize { x, .. } => vec![*x],
            Op::Concat(vs, _) => vs.clone(),
        }
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// A leaf holding the current value of a stored parameter. Frozen
    /// parameters do not request gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.leaf(p.tensor.clone(), p.trainable, Some(id))
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(kind.name(), &sa, &sb)?;
        let (ma, mb) = (broadcast_map(&sa, &out_shape), broadcast_map(&sb, &out_shape));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        let cost = data.len() as u64;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(Tensor::new(out_shape, data)?, op, cost)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let cost = v.len() as u64;
        self.push(v, Op::Scale(a, c), cost)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let cost = v.len() as u64;
        self.push(v, Op::AddScalar(a), cost)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`. The batch dims of
    /// `b` must be empty or a trailing suffix of those of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let MatMulDims {
            batch,
            b_batch,
            m,
            k,
            n,
        } = dims;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = (bi % b_batch) * k * n;
            let oo = bi * m * n;
            for i in 0..m {
                let orow = &mut out[oo + i * n..oo + (i + 1) * n];
                for p in 0..k {
                    let av = da[ao + i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &db[bo + p * n..bo + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let cost = 2 * (batch * m * k * n) as u64;
        self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), cost)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("transpose", "rank must be at least 2"));
        }
        let r = shape.len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let v = permute_tensor(self.value(a), &axes)?;
        let cost = v.len() as u64;
        self.push(v, Op::TransposeLast(a), cost)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = permute_tensor(self.value(a), axes)?;
        let cost = v.len() as u64;
        self.push(v, Op::Permute(a, axes.to_vec()), cost)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a), 0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        let cost = 4 * v.len() as u64;
        self.push(v, Op::Sigmoid(a), cost)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        let cost = 4 * v.len() as u64;
        self.push(v, Op::Tanh(a), cost)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let cost = 8 * v.len() as u64;
        self.push(v, Op::Gelu(a), cost)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        let cost = v.len() as u64;
        self.push(v, Op::Exp(a), cost)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let cost = v.len() as u64;
        self.push(v, Op::Clamp(a, lo, hi), cost)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_layout("softmax", x.shape(), axis)?;
        let data = x.data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| data[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..n {
                    let e = (data[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let cost = 4 * data.len() as u64;
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.push(v, Op::Softmax(a, axis), cost)
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / d.max(1);
        let df = T::from_usize(d).unwrap();
        let (xd, gd, bd) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let nh = (row[i] - mean) * rs;
                normalized[r * d + i] = nh;
                out[r * d + i] = nh * gd[i] + bd[i];
            }
        }
        let cost = 8 * xd.len() as u64;
        let v = Tensor::new(xs, out)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            cost,
        )
    }

    /// `(x - mean) / (std + eps)` along `axis` (population std).
    pub fn standardize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let (v, centered, sigma) = standardize_with_stats(self.value(x), axis, eps)?;
        let cost = 6 * v.len() as u64;
        self.push(
            v,
            Op::Standardize {
                x,
                axis,
                eps,
                centered,
                sigma,
            },
            cost,
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_layout("mean", x.shape(), axis)?;
        if n == 0 {
            return Err(Error::invalid("mean", "zero-extent axis"));
        }
        let nf = T::from_usize(n).unwrap();
        let data = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += data[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= nf);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let cost = data.len() as u64;
        self.push(Tensor::new(shape, out)?, Op::Mean(a, axis), cost)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let cost = self.value(a).len() as u64;
        self.push(Tensor::scalar(s), Op::SumAll(a), cost)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let s = x.data().iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        let cost = x.len() as u64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), cost)
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_layout("concat", &base, axis)?;
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let cost = out.len() as u64;
        self.push(Tensor::new(shape, out)?, Op::Concat(vars.to_vec(), axis), cost)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_layout("slice", x.shape(), axis)?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + len,
                limit: n,
            });
        }
        let d = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let cost = out.len() as u64;
        self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), cost)
    }

    /// Gathers rows of a rank-2 table: output `[indices.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::invalid("gather_rows", "table must be rank 2"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let cost = out.len() as u64;
        self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::GatherRows(table, indices.to_vec()),
            cost,
        )
    }

    /// `x · w + b` with `w: [in, out]` and optional `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape()),
            ));
        }
        self.backward_with(output, Tensor::ones(out.shape().to_vec()))
    }

    /// Reverse pass from `output` seeded with the cotangent `seed`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contributions = self.local_grads(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in &mut contributions {
                    *t = t.map(|v| v * T::lit(1.25) + T::lit(1e-3));
                }
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn reduce_broadcast(&self, g: &Tensor<T>, src: Var, scale: Option<&[T]>) -> Result<Tensor<T>> {
        let src_shape = self.shape(src).to_vec();
        let map = broadcast_map(&src_shape, g.shape());
        let mut out = vec![T::zero(); src_shape.iter().product()];
        for (i, (&m, &gv)) in map.iter().zip(g.data()).enumerate() {
            out[m] += match scale {
                Some(s) => gv * s[i],
                None => gv,
            };
        }
        Tensor::new(src_shape, out)
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, self.reduce_broadcast(g, *a, None)?),
                (*b, self.reduce_broadcast(g, *b, None)?),
            ],
            Op::Sub(a, b) => {
                let gb = self.reduce_broadcast(g, *b, None)?.map(|v| -v);
                vec![(*a, self.reduce_broadcast(g, *a, None)?), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let bv: Vec<T> = broadcast_map(sb, g.shape())
                    .iter()
                    .map(|&i| self.value(*b).data()[i])
                    .collect();
                let av: Vec<T> = broadcast_map(sa, g.shape())
                    .iter()
                    .map(|&i| self.value(*a).data()[i])
                    .collect();
                vec![
                    (*a, self.reduce_broadcast(g, *a, Some(&bv))?),
                    (*b, self.reduce_broadcast(g, *b, Some(&av))?),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => self.matmul_grads(*a, *b, g)?,
            Op::TransposeLast(a) => {
                let r = g.rank();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                vec![(*a, permute_tensor(g, &axes)?)]
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(*a, permute_tensor(g, &inv)?)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.shape(*a).to_vec())?)],
            Op::Sigmoid(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv)))],
            Op::Tanh(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv)))],
            Op::Gelu(a) => vec![(*a, zip_map(g, self.value(*a), |gv, xv| gv * gelu_parts(xv).1))],
            Op::Exp(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * yv))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                zip_map(
                    g,
                    self.value(*a),
                    |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            T::zero()
                        }
                    },
                ),
            )],
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_layout("softmax", y.shape(), *axis)?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot = (0..n).map(|i| gd[at(i)] * yd[at(i)]).sum::<T>();
                        for i in 0..n {
                            out[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), out)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = *y.shape().last().unwrap();
                let rows = rstd.len();
                let df = T::from_usize(d).unwrap();
                let (gd, gain_d) = (g.data(), self.value(*gain).data());
                let mut gx = vec![T::zero(); gd.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_gh = T::zero();
                    let mut mean_ghn = T::zero();
                    for i in 0..d {
                        let k = r * d + i;
                        ggain[i] += gd[k] * normalized[k];
                        gbias[i] += gd[k];
                        let gh = gd[k] * gain_d[i];
                        mean_gh += gh;
                        mean_ghn += gh * normalized[k];
                    }
                    mean_gh /= df;
                    mean_ghn /= df;
                    for i in 0..d {
                        let k = r * d + i;
                        let gh = gd[k] * gain_d[i];
                        gx[k] = rstd[r] * (gh - mean_gh - normalized[k] * mean_ghn);
                    }
                }
                vec![
                    (*x, Tensor::new(y.shape().to_vec(), gx)?),
                    (*gain, Tensor::new(vec![d], ggain)?),
                    (*bias, Tensor::new(vec![d], gbias)?),
                ]
            }
            Op::Standardize {
                x,
                axis,
                eps,
                centered,
                sigma,
            } => {
                let (outer, n, inner) = axis_layout("standardize", y.shape(), *axis)?;
                let nf = T::from_usize(n).unwrap();
                let gd = g.data();
                let mut out = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let s = sigma[o * inner + j];
                        let denom = s + *eps;
                        if denom == T::zero() {
                            // eps == 0 on a constant lane: the forward output is identically zero.
                            continue;
                        }
                        let mean_g = (0..n).map(|i| gd[at(i)]).sum::<T>() / nf;
                        let gd_dot = (0..n).map(|i| gd[at(i)] * centered[at(i)]).sum::<T>();
                        let coupling = if s > T::zero() {
                            gd_dot / (nf * s * denom * denom)
                        } else {
                            T::zero()
                        };
                        for i in 0..n {
                            out[at(i)] = (gd[at(i)] - mean_g) / denom - coupling * centered[at(i)];
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out)?)]
            }
            Op::Mean(a, axis) => {
                let src = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_layout("mean", &src, *axis)?;
                let nf = T::from_usize(n).unwrap();
                let gd = g.data();
                let mut out = vec![T::zero(); src.iter().product()];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            out[(o * n + i) * inner + j] = gd[o * inner + j] / nf;
                        }
                    }
                }
                vec![(*a, Tensor::new(src, out)?)]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.data()[0]))],
            Op::MeanAll(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                vec![(*a, Tensor::full(self.shape(*a).to_vec(), g.data()[0] / n))]
            }
            Op::Concat(vars, axis) => {
                let (outer, total, inner) = axis_layout("concat", g.shape(), *axis)?;
                let gd = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(vars.len());
                for &v in vars {
                    let n = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[s..s + n * inner]);
                    }
                    res.push((v, Tensor::new(self.shape(v).to_vec(), part)?));
                    offset += n;
                }
                res
            }
            Op::Slice(a, axis, start) => {
                let src = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_layout("slice", &src, *axis)?;
                let len = g.shape()[*axis];
                let mut out = vec![T::zero(); src.iter().product()];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, Tensor::new(src, out)?)]
            }
            Op::GatherRows(table, indices) => {
                let src = self.shape(*table).to_vec();
                let cols = src[1];
                let mut out = vec![T::zero(); src.iter().product()];
                let gd = g.data();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        out[i * cols + c] += gd[r * cols + c];
                    }
                }
                vec![(*table, Tensor::new(src, out)?)]
            }
        })
    }

    fn matmul_grads(&self, a: Var, b: Var, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let (dims, _) = matmul_dims(self.shape(a), self.shape(b))?;
        let MatMulDims {
            batch,
            b_batch,
            m,
            k,
            n,
        } = dims;
        let (da, db, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        let mut ga = vec![T::zero(); da.len()];
        let mut gb = vec![T::zero(); db.len()];
        let need_a = self.nodes[a.0].needs_grad;
        let need_b = self.nodes[b.0].needs_grad;
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = (bi % b_batch) * k * n;
            let go = bi * m * n;
            for i in 0..m {
                let grow = &gd[go + i * n..go + (i + 1) * n];
                for p in 0..k {
                    if need_a {
                        let brow = &db[bo + p * n..bo + (p + 1) * n];
                        ga[ao + i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                    }
                    if need_b {
                        let av = da[ao + i * k + p];
                        let gbrow = &mut gb[bo + p * n..bo + (p + 1) * n];
                        for (o, &x) in gbrow.iter_mut().zip(grow) {
                            *o += av * x;
                        }
                    }
                }
            }
        }
        let mut res = Vec::with_capacity(2);
        if need_a {
            res.push((a, Tensor::new(self.shape(a).to_vec(), ga)?));
        }
        if need_b {
            res.push((b, Tensor::new(self.shape(b).to_vec(), gb)?));
        }
        Ok(res)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(
            "permute",
            format!("{axes:?} is not a permutation of rank {r}"),
        ));
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; r];
    let mut lin = 0usize;
    let d = x.data();
    for _ in 0..numel {
        out.push(d[lin]);
        for k in (0..r).rev() {
            idx[k] += 1;
            lin += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            lin -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

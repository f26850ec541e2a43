//! Define-by-run compute graph over [`Array`] values with reverse-mode
//! differentiation. A fresh graph is built for every forward pass;
//! parameters live in a [`ParamStore`] and are bound into the graph per
//! pass, with gradients written back by [`Graph::backward`].

use super::array::{matmul, matmul_ta, matmul_tb, Array};
use super::params::ParamStore;
use super::rng::StreamRng;
use thiserror::Error;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} requires a non-empty last dimension, got shape {shape:?}")]
    EmptyDim { op: &'static str, shape: Vec<usize> },
    #[error("backward called twice on the same graph")]
    DoubleBackward,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("timestep index {index} exceeds positional table size {table}")]
    TimestepOutOfRange { index: usize, table: usize },
}

enum Op {
    Leaf,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MulBias(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    BatchMatmul(NodeId, NodeId),
    BatchMatmulTB(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxLastDim(NodeId),
    LayerNormLastDim(NodeId),
    Dropout(NodeId, Vec<f64>),
    Sum(NodeId),
    Reshape(NodeId),
    SliceLastDim(NodeId, usize, usize),
    Interleave3(NodeId, NodeId, NodeId),
    TakeStride3(NodeId, usize),
    TakeTime(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    StackRows(Vec<NodeId>),
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    backward_done: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            backward_done: false,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id].grad.as_ref()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a parameter from the store into the graph.
    pub fn param(&mut self, store: &ParamStore, pid: usize) -> NodeId {
        self.push(store.value(pid).clone(), Op::Param(pid), true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, KernelError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(KernelError::Shape {
                op: opname,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let v = self.value(a).zip_map(self.value(b), f);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, op, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    /// x[..., n] + bias[n].
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, KernelError> {
        self.bias_op("add_bias", x, bias, |a, b| a + b, true)
    }

    /// x[..., n] * bias[n].
    pub fn mul_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, KernelError> {
        self.bias_op("mul_bias", x, bias, |a, b| a * b, false)
    }

    fn bias_op(
        &mut self,
        opname: &'static str,
        x: NodeId,
        bias: NodeId,
        f: impl Fn(f64, f64) -> f64,
        additive: bool,
    ) -> Result<NodeId, KernelError> {
        let n = self.value(x).last_dim();
        if self.value(bias).shape() != [n] {
            return Err(KernelError::Shape {
                op: opname,
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            for (a, b) in row.iter().zip(bv) {
                out.push(f(*a, *b));
            }
        }
        let v = Array::new(xv.shape().to_vec(), out);
        let needs = self.needs(x) || self.needs(bias);
        let op = if additive {
            Op::AddBias(x, bias)
        } else {
            Op::MulBias(x, bias)
        };
        Ok(self.push(v, op, needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KernelError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = matmul(self.value(a), self.value(b), sa[0], sa[1], sb[1]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a, b), needs))
    }

    /// [b,m,k] x [b,k,n] -> [b,m,n].
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(KernelError::Shape {
                op: "batch_matmul",
                left: sa,
                right: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            let av = Array::new(
                vec![m, k],
                self.value(a).data()[i * m * k..(i + 1) * m * k].to_vec(),
            );
            let bv = Array::new(
                vec![k, n],
                self.value(b).data()[i * k * n..(i + 1) * k * n].to_vec(),
            );
            data.extend_from_slice(matmul(&av, &bv, m, k, n).data());
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(vec![bs, m, n], data),
            Op::BatchMatmul(a, b),
            needs,
        ))
    }

    /// [b,m,k] x [b,n,k]^T -> [b,m,n].
    pub fn batch_matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(KernelError::Shape {
                op: "batch_matmul_tb",
                left: sa,
                right: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            let av = Array::new(
                vec![m, k],
                self.value(a).data()[i * m * k..(i + 1) * m * k].to_vec(),
            );
            let bv = Array::new(
                vec![n, k],
                self.value(b).data()[i * n * k..(i + 1) * n * k].to_vec(),
            );
            data.extend_from_slice(matmul_tb(&av, &bv, m, k, n).data());
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::new(vec![bs, m, n], data),
            Op::BatchMatmulTB(a, b),
            needs,
        ))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(KernelError::EmptyDim {
                op: "softmax_lastdim",
                shape: self.value(x).shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&a| (a - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / s));
        }
        let v = Array::new(xv.shape().to_vec(), out);
        let needs = self.needs(x);
        Ok(self.push(v, Op::SoftmaxLastDim(x), needs))
    }

    /// Normalizes the last dimension to zero mean, unit variance
    /// (population). Affine scale/shift is composed with mul_bias/add_bias.
    pub fn layer_norm_lastdim(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(KernelError::EmptyDim {
                op: "layer_norm_lastdim",
                shape: self.value(x).shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().map(|&a| (a - mean) * inv));
        }
        let v = Array::new(xv.shape().to_vec(), out);
        let needs = self.needs(x);
        Ok(self.push(v, Op::LayerNormLastDim(x), needs))
    }

    /// Inverted dropout: scales kept entries by 1/(1-p) at train time and
    /// is a pass-through in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut StreamRng) -> NodeId {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.unit() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Array::new(xv.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(v, Op::Dropout(x, mask), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(v, Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(v, Op::Reshape(x), needs)
    }

    /// x[..., n] -> x[..., start..start+len].
    pub fn slice_lastdim(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let n = self.value(x).last_dim();
        assert!(start + len <= n);
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(x);
        self.push(Array::new(shape, out), Op::SliceLastDim(x, start, len), needs)
    }

    /// Three [B,K,H] streams -> [B,3K,H] interleaved per timestep in the
    /// order (a, b, c).
    pub fn interleave3(&mut self, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId, KernelError> {
        let sa = self.value(a).shape().to_vec();
        for other in [b, c] {
            if self.value(other).shape() != sa.as_slice() {
                return Err(KernelError::Shape {
                    op: "interleave3",
                    left: sa,
                    right: self.value(other).shape().to_vec(),
                });
            }
        }
        let (bs, k, h) = (sa[0], sa[1], sa[2]);
        let mut out = Vec::with_capacity(bs * 3 * k * h);
        for bi in 0..bs {
            for ki in 0..k {
                let off = (bi * k + ki) * h;
                out.extend_from_slice(&self.value(a).data()[off..off + h]);
                out.extend_from_slice(&self.value(b).data()[off..off + h]);
                out.extend_from_slice(&self.value(c).data()[off..off + h]);
            }
        }
        let needs = self.needs(a) || self.needs(b) || self.needs(c);
        Ok(self.push(
            Array::new(vec![bs, 3 * k, h], out),
            Op::Interleave3(a, b, c),
            needs,
        ))
    }

    /// [B,3K,H] -> [B,K,H], taking positions 3t+offset.
    pub fn take_stride3(&mut self, x: NodeId, offset: usize) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert!(s.len() == 3 && s[1] % 3 == 0 && offset < 3);
        let (bs, k, h) = (s[0], s[1] / 3, s[2]);
        let mut out = Vec::with_capacity(bs * k * h);
        for bi in 0..bs {
            for ki in 0..k {
                let off = (bi * 3 * k + 3 * ki + offset) * h;
                out.extend_from_slice(&self.value(x).data()[off..off + h]);
            }
        }
        let needs = self.needs(x);
        self.push(Array::new(vec![bs, k, h], out), Op::TakeStride3(x, offset), needs)
    }

    /// [B,T,H] -> [B,H], taking time index t along the middle dimension.
    pub fn take_time(&mut self, x: NodeId, t: usize) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert!(s.len() == 3 && t < s[1]);
        let (bs, tt, h) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(bs * h);
        for bi in 0..bs {
            let off = (bi * tt + t) * h;
            out.extend_from_slice(&self.value(x).data()[off..off + h]);
        }
        let needs = self.needs(x);
        self.push(Array::new(vec![bs, h], out), Op::TakeTime(x, t), needs)
    }

    /// table[V,H] gathered by row indices -> [N,H].
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, KernelError> {
        let s = self.value(table).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (v, h) = (s[0], s[1]);
        for &i in &indices {
            if i >= v {
                return Err(KernelError::TimestepOutOfRange { index: i, table: v });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * h);
        for &i in &indices {
            out.extend_from_slice(&self.value(table).data()[i * h..(i + 1) * h]);
        }
        let needs = self.needs(table);
        let n = indices.len();
        Ok(self.push(
            Array::new(vec![n, h], out),
            Op::GatherRows(table, indices),
            needs,
        ))
    }

    /// K tensors of shape [B,H] -> [B,K,H].
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, KernelError> {
        assert!(!parts.is_empty());
        let s0 = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != s0.as_slice() {
                return Err(KernelError::Shape {
                    op: "stack_rows",
                    left: s0,
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (bs, h) = (s0[0], s0[1]);
        let k = parts.len();
        let mut out = vec![0.0; bs * k * h];
        for (ki, &p) in parts.iter().enumerate() {
            for bi in 0..bs {
                let dst = (bi * k + ki) * h;
                let src = bi * h;
                out[dst..dst + h].copy_from_slice(&self.value(p).data()[src..src + h]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Array::new(vec![bs, k, h], out),
            Op::StackRows(parts.to_vec()),
            needs,
        ))
    }

    fn add_grad(&mut self, id: NodeId, g: Array) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Parameter gradients are
    /// accumulated into the store.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), KernelError> {
        if self.backward_done {
            return Err(KernelError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(KernelError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(Array::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }

        for i in 0..self.nodes.len() {
            if let Op::Param(pid) = self.nodes[i].op {
                if let Some(g) = &self.nodes[i].grad {
                    if !g.all_finite() {
                        return Err(KernelError::NonFiniteGrad(store.name(pid).to_string()));
                    }
                    store.grad_mut(pid).add_assign(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: NodeId, g: &Array) -> Result<(), KernelError> {
        // Ops are listed with their adjoint rules; each arm computes the
        // input cotangents from the output cotangent `g` and stored values.
        enum Pending {
            One(NodeId, Array),
            Two(NodeId, Array, NodeId, Array),
            Many(Vec<(NodeId, Array)>),
            None,
        }
        let pending = match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => Pending::None,
            Op::Add(a, b) => Pending::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Pending::Two(*a, g.clone(), *b, g.map(|x| -x)),
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                Pending::Two(*a, ga, *b, gb)
            }
            Op::Scale(a, c) => Pending::One(*a, g.map(|x| x * c)),
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Pending::Two(*x, g.clone(), *bias, Array::new(vec![n], gb))
            }
            Op::MulBias(x, bias) => {
                let n = self.value(*bias).len();
                let bd = self.value(*bias).data().to_vec();
                let xd = self.value(*x).data().to_vec();
                let mut gx = Vec::with_capacity(g.len());
                let mut gb = vec![0.0; n];
                for (ri, row) in g.data().chunks(n).enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        gx.push(v * bd[j]);
                        gb[j] += v * xd[ri * n + j];
                    }
                }
                Pending::Two(
                    *x,
                    Array::new(self.value(*x).shape().to_vec(), gx),
                    *bias,
                    Array::new(vec![n], gb),
                )
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = matmul_tb(g, self.value(*b), m, n, k);
                let gb = matmul_ta(self.value(*a), g, k, m, n);
                Pending::Two(*a, ga, *b, gb)
            }
            Op::BatchMatmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut ga = Vec::with_capacity(bs * m * k);
                let mut gb = Vec::with_capacity(bs * k * n);
                for bi in 0..bs {
                    let gs = Array::new(vec![m, n], g.data()[bi * m * n..(bi + 1) * m * n].to_vec());
                    let av =
                        Array::new(vec![m, k], self.value(*a).data()[bi * m * k..(bi + 1) * m * k].to_vec());
                    let bv =
                        Array::new(vec![k, n], self.value(*b).data()[bi * k * n..(bi + 1) * k * n].to_vec());
                    ga.extend_from_slice(matmul_tb(&gs, &bv, m, n, k).data());
                    gb.extend_from_slice(matmul_ta(&av, &gs, k, m, n).data());
                }
                Pending::Two(
                    *a,
                    Array::new(vec![bs, m, k], ga),
                    *b,
                    Array::new(vec![bs, k, n], gb),
                )
            }
            Op::BatchMatmulTB(a, b) => {
                // c = a b^T per batch: da = dc b, db = dc^T a.
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                let mut ga = Vec::with_capacity(bs * m * k);
                let mut gb = Vec::with_capacity(bs * n * k);
                for bi in 0..bs {
                    let gs = Array::new(vec![m, n], g.data()[bi * m * n..(bi + 1) * m * n].to_vec());
                    let av =
                        Array::new(vec![m, k], self.value(*a).data()[bi * m * k..(bi + 1) * m * k].to_vec());
                    let bv =
                        Array::new(vec![n, k], self.value(*b).data()[bi * n * k..(bi + 1) * n * k].to_vec());
                    ga.extend_from_slice(matmul(&gs, &bv, m, n, k).data());
                    gb.extend_from_slice(matmul_ta(&gs, &av, n, m, k).data());
                }
                Pending::Two(
                    *a,
                    Array::new(vec![bs, m, k], ga),
                    *b,
                    Array::new(vec![bs, n, k], gb),
                )
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                Pending::One(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)))
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                Pending::One(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                Pending::One(*x, g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }))
            }
            Op::SoftmaxLastDim(x) => {
                let y = &self.nodes[i].value;
                let n = y.last_dim();
                let mut gx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                Pending::One(*x, Array::new(y.shape().to_vec(), gx))
            }
            Op::LayerNormLastDim(x) => {
                let y = &self.nodes[i].value;
                let xv = self.value(*x);
                let n = y.last_dim();
                let nf = n as f64;
                let mut gx = Vec::with_capacity(y.len());
                for ((grow, yrow), xrow) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(xv.data().chunks(n))
                {
                    let mean = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gmean = grow.iter().sum::<f64>() / nf;
                    let gydot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<f64>() / nf;
                    gx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| inv * (gv - gmean - yv * gydot)),
                    );
                }
                Pending::One(*x, Array::new(y.shape().to_vec(), gx))
            }
            Op::Dropout(x, mask) => {
                let data: Vec<f64> = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                Pending::One(*x, Array::new(g.shape().to_vec(), data))
            }
            Op::Sum(x) => {
                let gv = g.item();
                Pending::One(*x, Array::full(self.value(*x).shape().to_vec(), gv))
            }
            Op::Reshape(x) => Pending::One(
                *x,
                g.clone().reshape(self.value(*x).shape().to_vec()),
            ),
            Op::SliceLastDim(x, start, len) => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let mut gx = vec![0.0; xv.len()];
                for (ri, grow) in g.data().chunks(*len).enumerate() {
                    gx[ri * n + start..ri * n + start + len].copy_from_slice(grow);
                }
                Pending::One(*x, Array::new(xv.shape().to_vec(), gx))
            }
            Op::Interleave3(a, b, c) => {
                let s = self.value(*a).shape().to_vec();
                let (bs, k, h) = (s[0], s[1], s[2]);
                let mut gs = vec![
                    vec![0.0; bs * k * h],
                    vec![0.0; bs * k * h],
                    vec![0.0; bs * k * h],
                ];
                for bi in 0..bs {
                    for ki in 0..k {
                        for (which, gpart) in gs.iter_mut().enumerate() {
                            let src = (bi * 3 * k + 3 * ki + which) * h;
                            let dst = (bi * k + ki) * h;
                            gpart[dst..dst + h].copy_from_slice(&g.data()[src..src + h]);
                        }
                    }
                }
                let gc = gs.pop().unwrap();
                let gb = gs.pop().unwrap();
                let ga = gs.pop().unwrap();
                Pending::Many(vec![
                    (*a, Array::new(s.clone(), ga)),
                    (*b, Array::new(s.clone(), gb)),
                    (*c, Array::new(s, gc)),
                ])
            }
            Op::TakeStride3(x, offset) => {
                let xs = self.value(*x).shape().to_vec();
                let (bs, k3, h) = (xs[0], xs[1], xs[2]);
                let k = k3 / 3;
                let mut gx = vec![0.0; bs * k3 * h];
                for bi in 0..bs {
                    for ki in 0..k {
                        let dst = (bi * k3 + 3 * ki + offset) * h;
                        let src = (bi * k + ki) * h;
                        gx[dst..dst + h].copy_from_slice(&g.data()[src..src + h]);
                    }
                }
                Pending::One(*x, Array::new(xs, gx))
            }
            Op::TakeTime(x, t) => {
                let xs = self.value(*x).shape().to_vec();
                let (bs, tt, h) = (xs[0], xs[1], xs[2]);
                let mut gx = vec![0.0; bs * tt * h];
                for bi in 0..bs {
                    let dst = (bi * tt + t) * h;
                    gx[dst..dst + h].copy_from_slice(&g.data()[bi * h..(bi + 1) * h]);
                }
                Pending::One(*x, Array::new(xs, gx))
            }
            Op::GatherRows(table, indices) => {
                let ts = self.value(*table).shape().to_vec();
                let h = ts[1];
                let mut gt = vec![0.0; ts[0] * h];
                for (ri, &idx) in indices.iter().enumerate() {
                    for j in 0..h {
                        gt[idx * h + j] += g.data()[ri * h + j];
                    }
                }
                Pending::One(*table, Array::new(ts, gt))
            }
            Op::StackRows(parts) => {
                let s = self.value(parts[0]).shape().to_vec();
                let (bs, h) = (s[0], s[1]);
                let k = parts.len();
                let mut outs = Vec::with_capacity(k);
                for (ki, &p) in parts.iter().enumerate() {
                    let mut gp = vec![0.0; bs * h];
                    for bi in 0..bs {
                        let src = (bi * k + ki) * h;
                        gp[bi * h..(bi + 1) * h].copy_from_slice(&g.data()[src..src + h]);
                    }
                    outs.push((p, Array::new(s.clone(), gp)));
                }
                Pending::Many(outs)
            }
        };
        match pending {
            Pending::None => {}
            Pending::One(a, ga) => self.add_grad(a, ga),
            Pending::Two(a, ga, b, gb) => {
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Pending::Many(v) => {
                for (id, ga) in v {
                    self.add_grad(id, ga);
                }
            }
        }
        Ok(())
    }
}

/// Masked scaled dot-product attention over [B,T,d] streams. `mask` is an
/// additive [B,T,T] leaf (0 where allowed, large negative where
/// forbidden). Output position t is a convex combination of the allowed
/// value rows.
pub fn masked_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: NodeId,
) -> Result<NodeId, KernelError> {
    let d = g.value(q).last_dim();
    let scores = g.batch_matmul_tb(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let masked = g.add(scaled, mask)?;
    let weights = g.softmax_lastdim(masked)?;
    g.batch_matmul(weights, v)
}

/// Additive causal mask of shape [b, t, t].
pub fn causal_mask(b: usize, t: usize) -> Array {
    let mut data = vec![0.0; b * t * t];
    for bi in 0..b {
        for i in 0..t {
            for j in (i + 1)..t {
                data[(bi * t + i) * t + j] = -1e9;
            }
        }
    }
    Array::new(vec![b, t, t], data)
}

/// Causal self-attention for a single [T,d] (or batched [B,T,d]) stream.
pub fn causal_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, KernelError> {
    let qs = g.value(q).shape().to_vec();
    let (single, b, t, d) = match qs.len() {
        2 => (true, 1, qs[0], qs[1]),
        3 => (false, qs[0], qs[1], qs[2]),
        _ => {
            return Err(KernelError::Shape {
                op: "causal_attention",
                left: qs.clone(),
                right: qs,
            })
        }
    };
    for other in [k, v] {
        if g.value(other).shape() != g.value(q).shape() {
            return Err(KernelError::Shape {
                op: "causal_attention",
                left: g.value(q).shape().to_vec(),
                right: g.value(other).shape().to_vec(),
            });
        }
    }
    let (q3, k3, v3) = if single {
        (
            g.reshape(q, vec![1, t, d]),
            g.reshape(k, vec![1, t, d]),
            g.reshape(v, vec![1, t, d]),
        )
    } else {
        (q, k, v)
    };
    let mask = causal_mask(b, t);
    let mask = g.leaf(mask);
    let out = masked_attention(g, q3, k3, v3, mask)?;
    Ok(if single { g.reshape(out, vec![t, d]) } else { out })
}

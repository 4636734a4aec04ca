//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order, so a node's inputs
//! always precede it. Leaves are either parameters (they get gradients) or
//! constants (detached: they never appear in a [`Gradients`] map). A tape is
//! built for one forward pass and dropped afterwards.
//!
//! ```
//! use stsc_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowL2Normalize(Var, Vec<f64>),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    Submatrix(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowL2Normalize(..) => "row_l2_normalize",
            Op::Reshape(..) => "reshape",
            Op::SelectRows(..) => "select_rows",
            Op::Submatrix(..) => "submatrix",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, f64)>,
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.expect_matrix("softmax_rows")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_row(t.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
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

    /// Scales the adjoint of one primitive by `factor`. Only used to prove
    /// that gradient checks catch a broken backward rule.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Param });
        Var(self.nodes.len() - 1)
    }

    /// A detached leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)`, elementwise.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.expect_matrix("log_softmax_rows")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::LogSoftmaxRows(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = t.map(libm::log);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Row-wise L2 normalization. Zero rows map to zero rows; their indices
    /// are returned alongside the node.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let t = self.value(a);
        let (r, _) = t.expect_matrix("row_l2_normalize")?;
        let norms: Vec<f64> = (0..r)
            .map(|i| libm::sqrt(t.row(i).iter().map(|v| v * v).sum::<f64>()))
            .collect();
        let normalized = t.row_l2_normalize()?;
        let v = self.push(normalized.tensor, Op::RowL2Normalize(a, norms))?;
        Ok((v, normalized.zero_rows))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::SelectRows(a, idx.to_vec()))
    }

    /// The square block `[idx, idx]` of a matrix node.
    pub fn submatrix(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).submatrix(idx)?;
        self.push(out, Op::Submatrix(a, idx.to_vec()))
    }

    /// Reverse sweep from a scalar node. The tape is not modified, so calling
    /// this repeatedly (or from different losses) is fine.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(root.shape()));
        let mut grads = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let g = match self.fault {
                Some((name, factor)) if name == node.op.name() => g.scale(factor),
                _ => g,
            };
            for (input, contrib) in self.local_adjoints(node, &g)? {
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(node.op, Op::Param) {
                grads.insert(Var(i), g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_adjoints(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        let res = match &node.op {
            Op::Param | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = g.matmul(&bv.transpose()?)?;
                let gb = av.transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |g, y| g * y);
                let gb = g.zip_map(self.value(*a), |g, x| g * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                vec![(*a, ga)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, y| g * y * (1.0 - y)))],
            Op::Softplus(a) => vec![(*a, g.zip_map(self.value(*a), |g, x| g * sigmoid(x)))],
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut data = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        data[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut data = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        data[i * c + j] = gr[j] - libm::exp(y[j]) * gsum;
                    }
                }
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), |g, x| g / x))],
            Op::Square(a) => vec![(*a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x))],
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                vec![(*a, Tensor::full(shape, g.item()))]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                vec![(*a, Tensor::full(av.shape(), g.item() / av.len() as f64))]
            }
            Op::RowL2Normalize(a, norms) => {
                // d(x/|x|) = (g - y (y . g)) / |x|
                let c = out.cols();
                let mut data = vec![0.0; out.len()];
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        data[i * c + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut acc = Tensor::zeros(av.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut acc.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                vec![(*a, acc)]
            }
            Op::Submatrix(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let n = idx.len();
                let mut acc = Tensor::zeros(av.shape());
                for (p, &i) in idx.iter().enumerate() {
                    for (q, &j) in idx.iter().enumerate() {
                        acc.data_mut()[i * c + j] += g.data()[p * n + q];
                    }
                }
                vec![(*a, acc)]
            }
        };
        Ok(res)
    }
}

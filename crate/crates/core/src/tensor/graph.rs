use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::{GradMap, ParamStore, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Affine,
    ScaleBy,
    Tanh,
    Sigmoid,
    Log,
    Concat,
    Slice,
    Gather,
    Row,
    Stack,
    Reshape,
    Softmax,
    Sum,
    Pick,
    ScatterAdd,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "matmul" => Self::MatMul,
            "add_bias" | "addbias" => Self::AddBias,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "affine" => Self::Affine,
            "scale_by" | "scaleby" => Self::ScaleBy,
            "tanh" => Self::Tanh,
            "sigmoid" => Self::Sigmoid,
            "log" => Self::Log,
            "concat" => Self::Concat,
            "slice" => Self::Slice,
            "gather" => Self::Gather,
            "row" => Self::Row,
            "stack" => Self::Stack,
            "reshape" => Self::Reshape,
            "softmax" => Self::Softmax,
            "sum" => Self::Sum,
            "pick" => Self::Pick,
            "scatter_add" | "scatteradd" => Self::ScatterAdd,
            other => return Err(format!("unknown op `{other}`")),
        })
    }
}

/// Multiplies the gradient flowing through every op of one kind by `factor`.
///
/// Only used to prove that gradient checking notices a broken backward rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    Stack(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    Sum(Var),
    Pick(Var, usize),
    ScatterAdd(Var, Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Gather(..) => OpKind::Gather,
            Op::Row(..) => OpKind::Row,
            Op::Stack(..) => OpKind::Stack,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Pick(..) => OpKind::Pick,
            Op::ScatterAdd(..) => OpKind::ScatterAdd,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor ops. Nodes are created in evaluation order,
/// so the node list is already a topological order of the computation.
///
/// In inference mode values are still computed by the same kernels, but no
/// op records are kept and [`Graph::backward`] is unavailable.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
    consumed: bool,
    params: Option<&'a ParamStore>,
    param_vars: HashMap<String, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    fault: Option<BackwardFault>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            params: None,
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
            fault: None,
        }
    }

    /// Recording graph that resolves [`Graph::param`] against `params`.
    pub fn with_params(params: &'a ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Non-recording graph over `params`.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self {
            params: Some(params),
            recording: false,
            ..Self::new()
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(&v.0)?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    /// Inputs of `v`, for graph inspection.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::ScatterAdd(a, b, _) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Slice(a, _)
            | Op::Gather(a, _)
            | Op::Row(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Pick(a, _) => vec![*a],
            Op::Concat(vs) | Op::Stack(vs) => vs.clone(),
        }
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.recording && self.inputs_of(&op).any(|i| self.nodes[i.0].requires_grad);
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of<'o>(&self, op: &'o Op) -> Box<dyn Iterator<Item = Var> + 'o> {
        match op {
            Op::Leaf => Box::new(std::iter::empty()),
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::ScatterAdd(a, b, _) => Box::new([*a, *b].into_iter()),
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Slice(a, _)
            | Op::Gather(a, _)
            | Op::Row(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Pick(a, _) => Box::new(std::iter::once(*a)),
            Op::Concat(vs) | Op::Stack(vs) => Box::new(vs.iter().copied()),
        }
    }

    /// Leaf owning `t`. It is differentiable iff `t.requires_grad` and the graph records.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = self.recording && t.requires_grad;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing `t` without copying.
    pub fn leaf_ref(&mut self, t: &'a Tensor) -> Var {
        let requires_grad = self.recording && t.requires_grad;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf for a named parameter of the bound store; one node per name.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let t = store.get(name)?;
        let v = self.leaf_ref(t);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- forward ops -------------------------------------------------------

    /// `a @ b` for `a: [n×k]` or `a: [k]` (treated as one row) and `b: [k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 || av.rank() > 2 || av.cols() != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &x) in ad[i * k..(i + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&bd[kk * m..(kk + 1) * m]) {
                    *o += x * w;
                }
            }
        }
        let shape = if av.rank() == 1 { vec![m] } else { vec![n, m] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Adds a `[m]` bias to every row of `x: [n×m]` (or to `x: [m]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || xv.rank() == 0 || xv.cols() != bv.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let m = bv.numel();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.map(x, |v| scale * v + shift);
        self.push(t, Op::Affine(x, scale))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let Some(k) = sv.item() else {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: sv.shape().to_vec(),
            });
        };
        let t = self.map(x, |v| k * v);
        Ok(self.push(t, Op::ScaleBy(x, s)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Log(x))
    }

    /// Concatenates along the last axis. Inputs must share rank and row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Other("concat of nothing".into()))?);
        let (rank, rows) = (first.rank(), first.rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != rank || pv.rows() != rows || rank == 0 || rank > 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// `x[offset..offset + len]` of a vector.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(TensorError::Rank {
                op: "slice",
                expected: 1,
                shape: xv.shape().to_vec(),
            });
        }
        if offset + len > xv.numel() || len == 0 {
            return Err(TensorError::Index {
                op: "slice",
                index: offset + len,
                size: xv.numel(),
            });
        }
        let t = Tensor::vector(xv.data()[offset..offset + len].to_vec());
        Ok(self.push(t, Op::Slice(x, offset)))
    }

    /// Rows `ids` of `table: [V×d]`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "gather",
                expected: 2,
                shape: tv.shape().to_vec(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather(table, ids.to_vec())))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "row",
                expected: 2,
                shape: xv.shape().to_vec(),
            });
        }
        if i >= xv.rows() {
            return Err(TensorError::Index {
                op: "row",
                index: i,
                size: xv.rows(),
            });
        }
        let t = Tensor::vector(xv.row(i).to_vec());
        Ok(self.push(t, Op::Row(x, i)))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = self.value(*rows.first().ok_or_else(|| TensorError::Other("stack of nothing".into()))?);
        let d = first.numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let rv = self.value(r);
            if rv.rank() != 1 || rv.numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: rv.shape().to_vec(),
                });
            }
            out.extend_from_slice(rv.data());
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(t, Op::Stack(rows.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Softmax of a vector over the positions where `mask` is true (all
    /// positions when `mask` is `None`). Masked positions come out exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(TensorError::Rank {
                op: "softmax",
                expected: 1,
                shape: xv.shape().to_vec(),
            });
        }
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let out = softmax_values(xv.data(), mask).ok_or(TensorError::EmptySupport)?;
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if xv.rank() != 1 || i >= n {
            return Err(TensorError::Index {
                op: "pick",
                index: i,
                size: n,
            });
        }
        let t = Tensor::scalar(xv.data()[i]);
        Ok(self.push(t, Op::Pick(x, i)))
    }

    /// `out = [base; 0, …, 0]` (length `out_len`) with `src[i]` added at `index[i]`.
    pub fn scatter_add(&mut self, base: Var, src: Var, index: &[usize], out_len: usize) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if bv.rank() != 1 || sv.rank() != 1 || sv.numel() != index.len() || bv.numel() > out_len {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add",
                lhs: bv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; out_len];
        out[..bv.numel()].copy_from_slice(bv.data());
        for (&i, &s) in index.iter().zip(sv.data()) {
            if i >= out_len {
                return Err(TensorError::Index {
                    op: "scatter_add",
                    index: i,
                    size: out_len,
                });
            }
            out[i] += s;
        }
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::ScatterAdd(base, src, index.to_vec())))
    }

    /// Inverted dropout: zero each element with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `root`. Returns the gradient of every
    /// trainable parameter bound through [`Graph::param`]; gradients of other
    /// differentiable leaves are available through [`Graph::grad`].
    ///
    /// A graph supports a single backward pass.
    pub fn backward(&mut self, root: Var) -> Result<GradMap> {
        self.backward_scaled(root, 1.0)
    }

    /// As [`Graph::backward`], with the root gradient seeded to `seed` instead of 1.
    pub fn backward_scaled(&mut self, root: Var, seed: f64) -> Result<GradMap> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        if self.consumed {
            return Err(TensorError::Other("graph already consumed by a backward pass".into()));
        }
        let rv = self.value(root);
        if rv.numel() != 1 || rv.rank() > 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![seed]);
        let nodes = &self.nodes;

        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    g.iter_mut().for_each(|v| *v *= f.factor);
                }
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    self.leaf_grads.insert(i, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                    let (ad, bd) = (av.data(), bv.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for kk in 0..k {
                                let brow = &bd[kk * m..(kk + 1) * m];
                                ga[r * k + kk] += dot(grow, brow);
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for kk in 0..k {
                                let x = ad[r * k + kk];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(gx, &g, 1.0);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let m = gb.len();
                        for row in g.chunks(m) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, 1.0);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        axpy(gb, &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, 1.0);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        axpy(gb, &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((o, &gv), &bb) in ga.iter_mut().zip(&g).zip(bd) {
                            *o += gv * bb;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((o, &gv), &aa) in gb.iter_mut().zip(&g).zip(ad) {
                            *o += gv * aa;
                        }
                    }
                }
                Op::Affine(x, scale) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(gx, &g, *scale);
                    }
                }
                Op::ScaleBy(x, s) => {
                    let k = nodes[s.0].value.data()[0];
                    let xd = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(gx, &g, k);
                    }
                    if let Some(gs) = slot(&mut grads, nodes, *s) {
                        gs[0] += dot(&g, xd);
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gv), &yv) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gv), &yv) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Log(x) => {
                    let xd = nodes[x.0].value.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gv), &xv) in gx.iter_mut().zip(&g).zip(xd) {
                            *o += gv / xv;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p.0].value.cols();
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                axpy(&mut gp[r * pc..(r + 1) * pc], src, 1.0);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Slice(x, offset) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(&mut gx[*offset..*offset + g.len()], &g, 1.0);
                    }
                }
                Op::Gather(table, ids) => {
                    let d = node.value.cols();
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
                Op::Row(x, r) => {
                    let d = g.len();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(&mut gx[r * d..(r + 1) * d], &g, 1.0);
                    }
                }
                Op::Stack(rows) => {
                    let d = node.value.cols();
                    for (r, &v) in rows.iter().enumerate() {
                        if let Some(gv) = slot(&mut grads, nodes, v) {
                            axpy(gv, &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        axpy(gx, &g, 1.0);
                    }
                }
                Op::Softmax(x) => {
                    let d = dot(y, &g);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((o, &gv), &yv) in gx.iter_mut().zip(&g).zip(y) {
                            *o += yv * (gv - d);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::Pick(x, idx) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx[*idx] += g[0];
                    }
                }
                Op::ScatterAdd(base, src, index) => {
                    if let Some(gb) = slot(&mut grads, nodes, *base) {
                        let n = gb.len();
                        axpy(gb, &g[..n], 1.0);
                    }
                    if let Some(gs) = slot(&mut grads, nodes, *src) {
                        for (o, &i) in gs.iter_mut().zip(index) {
                            *o += g[i];
                        }
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for (name, v) in &self.param_vars {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                let shape = self.nodes[v.0].value.shape().to_vec();
                out.insert(name.clone(), Tensor::new(shape, g.clone())?);
            } else if self.nodes[v.0].requires_grad {
                out.insert(name.clone(), Tensor::zeros(self.nodes[v.0].value.shape()));
            }
        }
        Ok(out)
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax over unmasked positions; `None` if nothing is unmasked.
pub(crate) fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| keep(i))
        .map(|i| x[i])
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))?;
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if keep(i) { (x[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Some(out)
}

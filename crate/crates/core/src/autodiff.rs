//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the handles of its inputs, so nodes are always in topological order.
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every node that requires one.
//!
//! There is no implicit broadcasting. Binary elementwise ops accept either two
//! tensors of identical shape or a tensor and a rank-0 scalar; row/column
//! broadcasts are separate, explicitly named ops ([`Graph::add_bias`],
//! [`Graph::scale_rows`]).
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting the value reach an optimizer.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which side of a binary op, if any, is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Debug)]
struct LstmCache {
    steps: usize,
    hidden: usize,
    /// Post-activation gates per step, `[i | f | g | o]`, `steps × 4·hidden`.
    gates: Vec<f64>,
    /// Cell states per step, `steps × hidden`.
    cells: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Log1p(Var),
    Exp(Var),
    Softplus(Var),
    Softmax(Var),
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        rows: Var,
        index: Vec<usize>,
    },
    SpMM {
        matrix: Arc<Csr>,
        input: Var,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        /// Row-major `P × N`: softmax probabilities over allowed entries, 0 on masked ones.
        probs: Vec<f64>,
    },
    Lstm {
        input: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: LstmCache,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Log1p(..) => "log1p",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::SpMM { .. } => "spmm",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::Lstm { .. } => "lstm",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&n) if n > 0 => (shape.iter().product::<usize>() / n, n),
        _ => (1, shape.iter().product()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

/// Dense `a[m×k] · b[k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Dense `a[m×k] · b[n×k]ᵀ`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Dense `a[k×m]ᵀ · b[k×n]`.
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// The tape. One graph per forward pass; drop it afterwards.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. `requires_grad` marks it as a differentiable parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bc = if sa == sb {
            Broadcast::None
        } else if sa.is_empty() {
            Broadcast::Lhs
        } else if sb.is_empty() {
            Broadcast::Rhs
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(op, &sa, &sb));
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data) = match bc {
            Broadcast::None => (sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
            Broadcast::Lhs => (sb, db.iter().map(|&y| f(da[0], y)).collect()),
            Broadcast::Rhs => (sa, da.iter().map(|&x| f(x, db[0])).collect()),
        };
        self.push(shape, data, Op::Binary(kind, a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Offset(a), &[a])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    /// `x[m×n] + b[1×n]`, adding `b` to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = match (sx, sb) {
            ([_, n], [1, n2]) if n == n2 => *n,
            _ => return Err(Error::shape("add_bias", sx, sb)),
        };
        let shape = sx.to_vec();
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        self.push(shape, data, Op::AddBias(x, b), &[x, b])
    }

    /// `x[m×n] ⊙ s[m×1]`, scaling row `i` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        let n = match (sx, ss) {
            ([m, n], [m2, 1]) if m == m2 => *n,
            _ => return Err(Error::shape("scale_rows", sx, ss)),
        };
        let shape = sx.to_vec();
        let sv = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / n])
            .collect();
        self.push(shape, data, Op::ScaleRows(x, s), &[x, s])
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(alloc::format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `input[start..end]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::invalid(alloc::format!(
                "slice {start}..{end} on axis {axis} of shape {s:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let width = end - start;
        let src = self.data(input);
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let off = (o * len + start) * inner;
            data.extend_from_slice(&src[off..off + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        self.push(shape, data, Op::Slice { input, axis, start }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::shape("reshape", self.shape(input), shape));
        }
        let data = self.data(input).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(input), &[input])
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let (m, n) = self.value(input).dims2()?;
        let src = self.data(input);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], data, Op::Transpose(input), &[input])
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.data(input).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(input), &[input])
    }

    /// Mean of all entries, as a rank-0 scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: f64 = self.data(input).iter().sum();
        self.push(Vec::new(), vec![s / n as f64], Op::Mean(input), &[input])
    }

    /// Column means of an `m × n` matrix, as `1 × n`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let (m, n) = self.value(input).dims2()?;
        if m == 0 {
            return Err(Error::invalid("mean_rows of empty matrix"));
        }
        let src = self.data(input);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, s) in data.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *d += s;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        self.push(vec![1, n], data, Op::MeanRows(input), &[input])
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(input).iter().map(|&x| f(x)).collect();
        self.push(self.shape(input).to_vec(), data, op, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Sigmoid(input), sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Tanh(input), libm::tanh)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Relu(input), |x| x.max(0.0))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Exp(input), libm::exp)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Softplus(input), softplus)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, input: Var) -> Result<Var> {
        if let Some(x) = self.data(input).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", alloc::format!("non-positive input {x}")));
        }
        self.unary(input, Op::Log(input), libm::log)
    }

    /// `log(1 + x)`; every entry must exceed -1.
    pub fn log1p(&mut self, input: Var) -> Result<Var> {
        if let Some(x) = self.data(input).iter().find(|&&x| x <= -1.0) {
            return Err(Error::domain("log1p", alloc::format!("input {x} <= -1")));
        }
        self.unary(input, Op::Log1p(input), libm::log1p)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (rows, n) = last_axis(&shape);
        let src = self.data(input);
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(x) {
                *o = libm::exp(v - max);
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        self.push(shape, data, Op::Softmax(input), &[input])
    }

    /// Divides each slice along the last axis by its Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (rows, n) = last_axis(&shape);
        let src = self.data(input);
        let mut norms = Vec::with_capacity(rows);
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let norm = libm::sqrt(x.iter().map(|v| v * v).sum());
            if norm == 0.0 {
                return Err(Error::domain("l2_normalize", "zero-norm input"));
            }
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        self.push(shape, data, Op::L2Normalize { input, norms }, &[input])
    }

    /// Rows `table[index[0]], table[index[1]], ...` as a `len × d` matrix.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(alloc::format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            vec![index.len(), d],
            data,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    /// Copy of `base` with row `index[k]` replaced by row `k` of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.value(base).dims2()?;
        let (m, d2) = self.value(rows).dims2()?;
        if d != d2 || m != index.len() {
            return Err(Error::shape("scatter_rows", self.shape(base), self.shape(rows)));
        }
        let mut seen = vec![false; n];
        for &i in index {
            if i >= n || seen[i] {
                return Err(Error::invalid(alloc::format!(
                    "scatter_rows index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        let mut data = self.data(base).to_vec();
        let src = self.data(rows);
        for (k, &i) in index.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[k * d..(k + 1) * d]);
        }
        self.push(
            vec![n, d],
            data,
            Op::ScatterRows {
                base,
                rows,
                index: index.to_vec(),
            },
            &[base, rows],
        )
    }

    /// Constant sparse matrix times a dense matrix: `matrix · input`.
    pub fn spmm(&mut self, matrix: &Arc<Csr>, input: Var) -> Result<Var> {
        let (k, d) = self.value(input).dims2()?;
        if matrix.cols() != k {
            return Err(Error::shape(
                "spmm",
                &[matrix.rows(), matrix.cols()],
                self.shape(input),
            ));
        }
        let data = matrix.matmul_dense(self.data(input), d);
        self.push(
            vec![matrix.rows(), d],
            data,
            Op::SpMM {
                matrix: Arc::clone(matrix),
                input,
            },
            &[input],
        )
    }

    /// Summed softmax cross-entropy over the rows of `logits` (`P × N`).
    ///
    /// Row `p` scores class `targets[p]`; the classes in `excluded[p]` are
    /// removed from that row's softmax (treated as logit `-∞`). A target
    /// may not be excluded from its own row.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: &[Vec<usize>],
    ) -> Result<Var> {
        let (p, n) = self.value(logits).dims2()?;
        if targets.len() != p || excluded.len() != p {
            return Err(Error::invalid(alloc::format!(
                "masked_cross_entropy: {p} rows, {} targets, {} masks",
                targets.len(),
                excluded.len()
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; p * n];
        let mut allowed = vec![true; n];
        let mut loss = 0.0;
        for r in 0..p {
            allowed.iter_mut().for_each(|a| *a = true);
            for &e in &excluded[r] {
                if e >= n {
                    return Err(Error::invalid(alloc::format!("excluded class {e} >= {n}")));
                }
                allowed[e] = false;
            }
            let t = targets[r];
            if t >= n || !allowed[t] {
                return Err(Error::invalid(alloc::format!(
                    "target {t} out of range or excluded in row {r}"
                )));
            }
            let row = &src[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs[r * n..(r + 1) * n];
            let mut z = 0.0;
            for ((o, &v), &a) in out.iter_mut().zip(row).zip(&allowed) {
                if a {
                    *o = libm::exp(v - max);
                    z += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            loss += max + libm::log(z) - row[t];
        }
        self.push(
            Vec::new(),
            vec![loss],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Single-layer LSTM over a whole sequence, zero initial state.
    ///
    /// `input` is `T × in`, `w_ih` is `in × 4h`, `w_hh` is `h × 4h`, `bias` is
    /// `1 × 4h`, with gate blocks ordered input, forget, cell, output. Returns
    /// the hidden states as `T × h`.
    pub fn lstm(&mut self, input: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (steps, in_dim) = self.value(input).dims2()?;
        let (in2, four_h) = self.value(w_ih).dims2()?;
        let (h, four_h2) = self.value(w_hh).dims2()?;
        let bias_ok = self.shape(bias) == [1, four_h];
        if in2 != in_dim || four_h != 4 * h || four_h2 != four_h || !bias_ok {
            return Err(Error::shape("lstm", self.shape(w_ih), self.shape(w_hh)));
        }
        if steps == 0 {
            return Err(Error::invalid("lstm over empty sequence"));
        }
        let x = self.data(input);
        let wi = self.data(w_ih);
        let wh = self.data(w_hh);
        let b = self.data(bias);
        let pre_x = matmul_raw(x, wi, steps, in_dim, four_h);
        let mut gates = vec![0.0; steps * four_h];
        let mut cells = vec![0.0; steps * h];
        let mut hidden = vec![0.0; steps * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for t in 0..steps {
            let mut pre: Vec<f64> = pre_x[t * four_h..(t + 1) * four_h]
                .iter()
                .zip(b)
                .map(|(p, bb)| p + bb)
                .collect();
            let rec = matmul_raw(&h_prev, wh, 1, h, four_h);
            for (p, r) in pre.iter_mut().zip(&rec) {
                *p += r;
            }
            let g = &mut gates[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                let i_g = sigmoid(pre[j]);
                let f_g = sigmoid(pre[h + j]);
                let c_g = libm::tanh(pre[2 * h + j]);
                let o_g = sigmoid(pre[3 * h + j]);
                g[j] = i_g;
                g[h + j] = f_g;
                g[2 * h + j] = c_g;
                g[3 * h + j] = o_g;
                let c = f_g * c_prev[j] + i_g * c_g;
                cells[t * h + j] = c;
                hidden[t * h + j] = o_g * libm::tanh(c);
            }
            h_prev.copy_from_slice(&hidden[t * h..(t + 1) * h]);
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        }
        self.push(
            vec![steps, h],
            hidden,
            Op::Lstm {
                input,
                w_ih,
                w_hh,
                bias,
                cache: LstmCache {
                    steps,
                    hidden: h,
                    gates,
                    cells,
                },
            },
            &[input, w_ih, w_hh, bias],
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        if grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let at = |i: usize, side: Broadcast, d: &[f64]| {
                    if *bc == side {
                        d[0]
                    } else {
                        d[i]
                    }
                };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    Binary::Mul => (
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| gi * at(i, Broadcast::Rhs, db))
                            .collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| gi * at(i, Broadcast::Lhs, da))
                            .collect(),
                    ),
                };
                let reduce = |v: Vec<f64>, scalar: bool| {
                    if scalar {
                        vec![v.iter().sum()]
                    } else {
                        v
                    }
                };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &reduce(ga, *bc == Broadcast::Lhs));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &reduce(gb, *bc == Broadcast::Rhs));
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Offset(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.wants(*a) {
                    let ga = matmul_bt(g, self.data(*b), m, n, k);
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let gb = matmul_at(self.data(*a), g, m, k, n);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::ScaleRows(x, s) => {
                let n = self.shape(*x)[1];
                let (xv, sv) = (self.data(*x), self.data(*s));
                if self.wants(*x) {
                    let gx: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * sv[i / n]).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                if self.wants(*s) {
                    let mut gs = vec![0.0; sv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        gs[i / n] += gi * xv[i];
                    }
                    accumulate(&mut grads[s.0], &gs);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        accumulate(&mut grads[v.0], &gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, len, inner) = split_axis(s, *axis);
                let width = node.value.shape()[*axis];
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    gi[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                accumulate(&mut grads[input.0], &gi);
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j] / m as f64;
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Log1p(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / (1.0 + xi)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Softmax(a) => {
                let (rows, n) = last_axis(node.value.shape());
                let mut ga = vec![0.0; rows * n];
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::L2Normalize { input, norms } => {
                let (rows, n) = last_axis(node.value.shape());
                let mut ga = vec![0.0; rows * n];
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] = (gr[j] - y[j] * dot) / norms[r];
                    }
                }
                accumulate(&mut grads[input.0], &ga);
            }
            Op::GatherRows { table, index } => {
                let (n, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; n * d];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[k * d + j];
                    }
                }
                accumulate(&mut grads[table.0], &gt);
            }
            Op::ScatterRows { base, rows, index } => {
                let d = self.shape(*base)[1];
                if self.wants(*base) {
                    let mut gb = g.to_vec();
                    for &i in index {
                        gb[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                    }
                    accumulate(&mut grads[base.0], &gb);
                }
                if self.wants(*rows) {
                    let mut gr = Vec::with_capacity(index.len() * d);
                    for &i in index {
                        gr.extend_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    accumulate(&mut grads[rows.0], &gr);
                }
            }
            Op::SpMM { matrix, input } => {
                let d = self.shape(*input)[1];
                let gi = matrix.transpose_matmul_dense(g, d);
                accumulate(&mut grads[input.0], &gi);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] -= g[0];
                }
                accumulate(&mut grads[logits.0], &gl);
            }
            Op::Lstm {
                input,
                w_ih,
                w_hh,
                bias,
                cache,
            } => self.lstm_backward(idx, *input, *w_ih, *w_hh, *bias, cache, g, grads)?,
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        idx: usize,
        input: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: &LstmCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (steps, h) = (cache.steps, cache.hidden);
        let four_h = 4 * h;
        let in_dim = self.shape(input)[1];
        let x = self.data(input);
        let wi = self.data(w_ih);
        let wh = self.data(w_hh);
        let hidden = self.nodes[idx].value.data();

        let mut d_pre = vec![0.0; steps * four_h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..steps).rev() {
            let gt = &cache.gates[t * four_h..(t + 1) * four_h];
            let dp = &mut d_pre[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let c = cache.cells[t * h + j];
                let c_prev = if t > 0 { cache.cells[(t - 1) * h + j] } else { 0.0 };
                let tc = libm::tanh(c);
                let dh = g[t * h + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                dp[j] = dc * c_g * i_g * (1.0 - i_g);
                dp[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dp[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dp[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            dh_next = matmul_bt(dp, wh, 1, four_h, h);
        }

        if self.wants(input) {
            let gx = matmul_bt(&d_pre, wi, steps, four_h, in_dim);
            accumulate(&mut grads[input.0], &gx);
        }
        if self.wants(w_ih) {
            let gw = matmul_at(x, &d_pre, steps, in_dim, four_h);
            accumulate(&mut grads[w_ih.0], &gw);
        }
        if self.wants(w_hh) && steps > 1 {
            // h_{t-1} for t >= 1; h_{-1} = 0 contributes nothing.
            let h_prev = &hidden[..(steps - 1) * h];
            let gw = matmul_at(h_prev, &d_pre[four_h..], steps - 1, h, four_h);
            accumulate(&mut grads[w_hh.0], &gw);
        } else if self.wants(w_hh) {
            accumulate(&mut grads[w_hh.0], &vec![0.0; h * four_h]);
        }
        if self.wants(bias) {
            let mut gb = vec![0.0; four_h];
            for t in 0..steps {
                for (b, d) in gb.iter_mut().zip(&d_pre[t * four_h..(t + 1) * four_h]) {
                    *b += d;
                }
            }
            accumulate(&mut grads[bias.0], &gb);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        assert!(matches!(g.l2_normalize(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn no_implicit_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        let s = g.constant(Tensor::scalar(1.0));
        let y = g.add(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 6]);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get_or_zero(x).data(), &[0.0, 0.0]);
        assert!(!grads.has(x));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn overflow_surfaces_as_non_finite() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_cross_entropy_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 6]));
        let loss = g.masked_cross_entropy(x, &[2], &[vec![0, 5]]).unwrap();
        assert!((g.value(loss).item() - libm::log(4.0)).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert_eq!(gx.data()[5], 0.0);
        assert!((gx.data()[2] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn excluded_target_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        assert!(g.masked_cross_entropy(x, &[1], &[vec![1]]).is_err());
    }
}

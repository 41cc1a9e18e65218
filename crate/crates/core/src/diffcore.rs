//! Minimal tape-based reverse-mode automatic differentiation over dense
//! row-major `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. Values live on the
//! tape and are addressed by copyable [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse and
//! returns a [`Gradients`] table holding `d root / d node` for every node.
//!
//! Tensors are at most two-dimensional. Binary operations broadcast their
//! right-hand operand when it is a scalar, a row vector (`[m]` or `[1, m]`)
//! against `[n, m]`, or a column vector (`[n, 1]`) against `[n, m]`.
//!
//! ```
//! use survae_core::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("column index {index} out of range for width {width}")]
    ColumnOutOfRange { index: usize, width: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.len() > 2 {
            return Err(DiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix view; rank-0/1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Column,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Neg(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    RepeatRows(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; nodes unreachable from the root get an
    /// all-zero tensor of the node's shape.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records an input. Leaves and constants are the same thing on this tape;
    /// a constant is simply a leaf whose gradient nobody reads.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        Ok(self.push(value, op))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        let lb = self.nodes[b.0].value.len();
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if lb == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sa.len() == 2 {
            let (n, m) = (sa[0], sa[1]);
            let row = (sb.len() == 1 && sb[0] == m) || (sb.len() == 2 && sb[0] == 1 && sb[1] == m);
            if row {
                return Ok(Broadcast::Row);
            }
            if sb.len() == 2 && sb[0] == n && sb[1] == 1 {
                return Ok(Broadcast::Column);
            }
        }
        Err(DiffError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let cols = va.cols();
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data[rhs_index(kind, i, cols)]))
            .collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.push_checked(name, out, make(a, b, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let out = matmul_raw(va, vb);
        self.push_checked("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                left: va.shape.clone(),
                right: vec![],
            });
        }
        let out = transpose_raw(va);
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add(xw, b)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f);
        self.push_checked(name, out, op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |v| -v, Op::Neg(a))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.unary("powf", a, |v| v.powf(exponent), Op::Powf(a, exponent))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.unary("add_scalar", a, |v| v + offset, Op::AddScalar(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(a))
    }

    /// Row sums of a matrix, shape `[n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (n, m) = (v.rows(), v.cols());
        let data = (0..n).map(|r| v.data[r * m..(r + 1) * m].iter().sum()).collect();
        let out = Tensor {
            shape: vec![n, 1],
            data,
        };
        self.push_checked("sum_cols", out, Op::SumCols(a))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != n || v.shape.len() != 2 {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[parts[0].0].value.shape.clone(),
                    right: v.shape.clone(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor {
            shape: vec![n, total],
            data,
        };
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Gathers the listed columns (in order) of a matrix.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (n, m) = (v.rows(), v.cols());
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(DiffError::ColumnOutOfRange {
                index: bad,
                width: m,
            });
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            for &c in cols {
                data.push(v.data[r * m + c]);
            }
        }
        let out = Tensor {
            shape: vec![n, cols.len()],
            data,
        };
        Ok(self.push(out, Op::SelectCols(a, cols.to_vec())))
    }

    /// Repeats every row `times` times consecutively: row `i` of the input
    /// becomes rows `i*times .. (i+1)*times` of the output.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (n, m) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(n * m * times);
        for r in 0..n {
            for _ in 0..times {
                data.extend_from_slice(&v.data[r * m..(r + 1) * m]);
            }
        }
        let out = Tensor {
            shape: vec![n * times, m],
            data,
        };
        Ok(self.push(out, Op::RepeatRows(a, times)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_val.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, reduce_broadcast(g, val(*b), *kind));
            }
            Op::Sub(a, b, kind) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, reduce_broadcast(&g.map(|v| -v), val(*b), *kind));
            }
            Op::Mul(a, b, kind) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = va.cols();
                let ga = zip_index(g, |i, gi| gi * vb.data[rhs_index(*kind, i, cols)]);
                let gb_full = zip_index(g, |i, gi| gi * va.data[i]);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, reduce_broadcast(&gb_full, vb, *kind));
            }
            Op::Div(a, b, kind) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = va.cols();
                let ga = zip_index(g, |i, gi| gi / vb.data[rhs_index(*kind, i, cols)]);
                let gb_full = zip_index(g, |i, gi| {
                    let d = vb.data[rhs_index(*kind, i, cols)];
                    -gi * va.data[i] / (d * d)
                });
                accumulate(grads, *a, ga);
                accumulate(grads, *b, reduce_broadcast(&gb_full, vb, *kind));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, matmul_raw(g, &transpose_raw(vb)));
                accumulate(grads, *b, matmul_raw(&transpose_raw(va), g));
            }
            Op::Transpose(a) => accumulate(grads, *a, transpose_raw(g)),
            Op::Exp(a) => {
                let out = &node.value;
                accumulate(grads, *a, zip_index(g, |i, gi| gi * out.data[i]));
            }
            Op::Log(a) => {
                let va = val(*a);
                accumulate(grads, *a, zip_index(g, |i, gi| gi / va.data[i]));
            }
            Op::Tanh(a) => {
                let out = &node.value;
                accumulate(grads, *a, zip_index(g, |i, gi| gi * (1.0 - out.data[i] * out.data[i])));
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                accumulate(grads, *a, zip_index(g, |i, gi| gi * out.data[i] * (1.0 - out.data[i])));
            }
            Op::Softplus(a) => {
                let va = val(*a);
                accumulate(grads, *a, zip_index(g, |i, gi| gi * sigmoid(va.data[i])));
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Powf(a, p) => {
                let va = val(*a);
                accumulate(grads, *a, zip_index(g, |i, gi| gi * p * va.data[i].powf(p - 1.0)));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                accumulate(
                    grads,
                    *a,
                    zip_index(g, |i, gi| {
                        let x = va.data[i];
                        if x < *lo || x > *hi {
                            0.0
                        } else {
                            gi
                        }
                    }),
                );
            }
            Op::Sum(a) => {
                let va = val(*a);
                accumulate(grads, *a, Tensor::filled(va.shape(), g.item()));
            }
            Op::Mean(a) => {
                let va = val(*a);
                accumulate(grads, *a, Tensor::filled(va.shape(), g.item() / va.len() as f64));
            }
            Op::SumCols(a) => {
                let va = val(*a);
                let m = va.cols();
                let data = (0..va.len()).map(|i| g.data[i / m]).collect();
                accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: va.shape.clone(),
                        data,
                    },
                );
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(
                        grads,
                        p,
                        Tensor {
                            shape: val(p).shape.clone(),
                            data,
                        },
                    );
                    offset += w;
                }
            }
            Op::SelectCols(a, cols) => {
                let va = val(*a);
                let m = va.cols();
                let mut out = Tensor::zeros(va.shape());
                for r in 0..g.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        out.data[r * m + c] += g.data[r * cols.len() + j];
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::RepeatRows(a, times) => {
                let va = val(*a);
                let m = va.cols();
                let mut out = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    for s in 0..*times {
                        let src = (r * times + s) * m;
                        for c in 0..m {
                            out.data[r * m + c] += g.data[src + c];
                        }
                    }
                }
                accumulate(grads, *a, out);
            }
        }
    }
}

fn rhs_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
        Broadcast::Column => i / cols,
    }
}

fn zip_index(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    Tensor {
        shape: g.shape.clone(),
        data: g.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
    }
}

fn reduce_broadcast(g: &Tensor, target: &Tensor, kind: Broadcast) -> Tensor {
    match kind {
        Broadcast::Same => Tensor {
            shape: target.shape.clone(),
            data: g.data.clone(),
        },
        Broadcast::Scalar => Tensor {
            shape: target.shape.clone(),
            data: vec![g.data.iter().sum()],
        },
        Broadcast::Row => {
            let m = g.cols();
            let mut data = vec![0.0; m];
            for (i, v) in g.data.iter().enumerate() {
                data[i % m] += v;
            }
            Tensor {
                shape: target.shape.clone(),
                data,
            }
        }
        Broadcast::Column => {
            let m = g.cols();
            let mut data = vec![0.0; g.rows()];
            for (i, v) in g.data.iter().enumerate() {
                data[i / m] += v;
            }
            Tensor {
                shape: target.shape.clone(),
                data,
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(g.data) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let out = &mut data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data,
    }
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            data[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor {
        shape: vec![m, n],
        data,
    }
}

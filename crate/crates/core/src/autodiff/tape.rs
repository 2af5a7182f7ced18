use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::dense::gemm;
use crate::math;
use crate::operators::{project, reconstruct, DiffusionKind, Eigenbasis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the output cotangent `grad`. Entries
    /// whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op<'a> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Abs(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    Reshape(usize),
    Custom(Vec<usize>, Box<dyn CustomOp + 'a>),
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order; `backward` walks it in reverse.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn matmul_raw(a: &[f64], at: bool, b: &[f64], bt: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, at, b, bt, 0.0, &mut c);
    c
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Every op result is checked for NaN/inf and reported as
    /// `NonFiniteValue`.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, inputs: &[usize], name: &str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFiniteValue(String::from(name)));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op<'a>, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        if !ta.same_shape(tb) {
            return Err(mismatch(name, ta, tb));
        }
        let out = zip(ta, tb, f);
        self.push(out, op, &[a.0, b.0], name)
    }

    fn unary(&mut self, name: &str, x: Var, op: Op<'a>, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = map(self.v(x), f);
        self.push(out, op, &[x.0], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x.0), |v| -v)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x.0, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x.0), |v| v + s)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x.0), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x.0), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x.0), math::sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus(x.0), math::softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x.0), |v| v.exp())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x.0), |v| v.abs())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Op::Sqrt(x.0), |v| v.sqrt())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::BadConfig(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", x, Op::Clamp(x.0, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.rows() != k || tb.shape.len() > 2 || ta.shape.len() > 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let n = tb.cols();
        let out = Tensor { shape: vec![m, n], data: matmul_raw(&ta.data, false, &tb.data, false, m, k, n) };
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x.0), &[x.0], "transpose")
    }

    /// Concatenation along the last dimension; all inputs share the row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let rows = self.v(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.v(x);
            if t.rows() != rows {
                return Err(mismatch("concat", self.v(xs[0]), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let t = self.v(x);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(ids.clone()), &ids, "concat")
    }

    /// Concatenation along rows; all inputs share the column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows of nothing".into()));
        }
        let cols = self.v(xs[0]).cols();
        let mut data = Vec::new();
        for &x in xs {
            let t = self.v(x);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.v(xs[0]), t));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(ids.clone()), &ids, "concat_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = (t.rows(), t.cols());
        if start > end || end > c {
            return Err(Error::ShapeMismatch(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data[i * c + start..i * c + end]);
        }
        self.push(Tensor { shape: vec![r, w], data }, Op::SliceCols(x.0, start), &[x.0], "slice_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = (t.rows(), t.cols());
        if start > end || end > r {
            return Err(Error::ShapeMismatch(format!("slice_rows {start}..{end} of {r}")));
        }
        let data = t.data[start * c..end * c].to_vec();
        self.push(Tensor { shape: vec![end - start, c], data }, Op::SliceRows(x.0, start), &[x.0], "slice_rows")
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.v(x);
        if t.rows() != 1 {
            return Err(Error::ShapeMismatch(format!("broadcast_rows needs one row, got {:?}", t.shape)));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor { shape: vec![n, c], data }, Op::BroadcastRows(x.0), &[x.0], "broadcast_rows")
    }

    /// Repeats a single column `c` times.
    pub fn broadcast_cols(&mut self, x: Var, c: usize) -> Result<Var> {
        let t = self.v(x);
        if t.cols() != 1 {
            return Err(Error::ShapeMismatch(format!("broadcast_cols needs one column, got {:?}", t.shape)));
        }
        let r = t.rows();
        let mut data = Vec::with_capacity(r * c);
        for &v in &t.data {
            data.extend(core::iter::repeat(v).take(c));
        }
        self.push(Tensor { shape: vec![r, c], data }, Op::BroadcastCols(x.0), &[x.0], "broadcast_cols")
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.v(x), self.v(b));
        let c = tx.cols();
        if tb.rows() != 1 || tb.cols() != c {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            for (v, &bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let out = Tensor { shape: tx.shape.clone(), data };
        self.push(out, Op::AddRow(x.0, b.0), &[x.0, b.0], "add_row")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.v(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        if t.numel() == 0 {
            return Err(Error::ShapeMismatch("mean of an empty tensor".into()));
        }
        let s: f64 = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0], "mean")
    }

    /// Column sums, shape `[c]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data.chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::SumRows(x.0), &[x.0], "sum_rows")
    }

    /// Row sums, shape `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let c = t.cols().max(1);
        let out: Vec<f64> = t.data.chunks(c).map(|r| r.iter().sum()).collect();
        let n = out.len();
        self.push(Tensor { shape: vec![n, 1], data: out }, Op::SumCols(x.0), &[x.0], "sum_cols")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::ShapeMismatch(format!("gather_rows index {i} >= {r}")));
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let out = Tensor { shape: vec![idx.len(), c], data };
        self.push(out, Op::GatherRows(x.0, idx.to_vec()), &[x.0], "gather_rows")
    }

    /// `out[idx[i]] += x[i]` into `n` zero rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let t = self.v(x);
        let c = t.cols();
        if t.rows() != idx.len() {
            return Err(Error::ShapeMismatch(format!("scatter_add_rows: {} rows, {} indices", t.rows(), idx.len())));
        }
        let mut data = vec![0.0; n * c];
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::ShapeMismatch(format!("scatter index {j} >= {n}")));
            }
            for k in 0..c {
                data[j * c + k] += t.data[i * c + k];
            }
        }
        let out = Tensor { shape: vec![n, c], data };
        self.push(out, Op::ScatterAddRows(x.0, idx.to_vec()), &[x.0], "scatter_add_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(x).reshaped(shape)?;
        self.push(out, Op::Reshape(x.0), &[x.0], "reshape")
    }

    /// Records a caller-computed value whose backward is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp + 'a>) -> Result<Var> {
        let ids: Vec<usize> = inputs.iter().map(|x| x.0).collect();
        let name = op.name();
        self.push(output, Op::Custom(ids.clone(), op), &ids, name)
    }

    /// Heat diffusion of `x` (`n x c`) with per-channel times `t` (`c`
    /// values, already non-negative). Differentiable in both.
    pub fn spectral_diffuse(
        &mut self,
        x: Var,
        t: Var,
        basis: &'a Eigenbasis,
        mass: &'a [f64],
        kind: DiffusionKind,
    ) -> Result<Var> {
        let (tx, tt) = (self.v(x), self.v(t));
        let c = tx.cols();
        if tx.rows() != basis.n || tt.numel() != c || mass.len() != basis.n {
            return Err(mismatch("spectral_diffuse", tx, tt));
        }
        let coef = project(basis, mass, &tx.data, c);
        let mut scaled = coef.clone();
        for j in 0..basis.k {
            for ch in 0..c {
                scaled[j * c + ch] *= kind.filter(basis.values[j], tt.data[ch]);
            }
        }
        let out = Tensor { shape: vec![basis.n, c], data: reconstruct(basis, &scaled, c) };
        let op = SpectralDiffuse { basis, mass, kind, coef, c };
        self.custom(&[x, t], out, Box::new(op))
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(nodes[root.0].value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor { shape: nodes[root.0].value.shape.clone(), data: vec![1.0] });
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = vjp(&nodes, i, &g)?;
            for (j, gj) in contributions {
                if !nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn vjp(nodes: &[Node<'_>], i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |j: usize| &nodes[j].value;
    let out = &nodes[i].value;
    let needs = |j: usize| nodes[j].requires_grad;
    let like = |j: usize, data: Vec<f64>| Tensor { shape: nodes[j].value.shape.clone(), data };
    let res = match &nodes[i].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |v| -v))],
        Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |x, y| x * y)), (*b, zip(g, val(*a), |x, y| x * y))],
        Op::Div(a, b) => {
            let ga = zip(g, val(*b), |x, y| x / y);
            let gb = Tensor {
                shape: g.shape.clone(),
                data: (0..g.numel()).map(|k| -g.data[k] * out.data[k] / val(*b).data[k]).collect(),
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Neg(x) => vec![(*x, map(g, |v| -v))],
        Op::Scale(x, s) => {
            let s = *s;
            vec![(*x, map(g, |v| v * s))]
        }
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Square(x) => vec![(*x, zip(g, val(*x), |gg, v| 2.0 * gg * v))],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut r = Vec::new();
            if needs(*a) {
                r.push((*a, like(*a, matmul_raw(&g.data, false, &tb.data, true, m, n, k))));
            }
            if needs(*b) {
                r.push((*b, like(*b, matmul_raw(&ta.data, true, &g.data, false, k, m, n))));
            }
            r
        }
        Op::Transpose(x) => {
            let (r, c) = (g.rows(), g.cols());
            let mut data = vec![0.0; r * c];
            for p in 0..r {
                for q in 0..c {
                    data[q * r + p] = g.data[p * c + q];
                }
            }
            vec![(*x, like(*x, data))]
        }
        Op::ConcatCols(ids) => {
            let total = g.cols();
            let rows = g.rows();
            let mut off = 0;
            let mut r = Vec::new();
            for &j in ids {
                let w = val(j).cols();
                if needs(j) {
                    let mut data = Vec::with_capacity(rows * w);
                    for p in 0..rows {
                        data.extend_from_slice(&g.data[p * total + off..p * total + off + w]);
                    }
                    r.push((j, like(j, data)));
                }
                off += w;
            }
            r
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            let mut r = Vec::new();
            for &j in ids {
                let len = val(j).numel();
                if needs(j) {
                    r.push((j, like(j, g.data[off..off + len].to_vec())));
                }
                off += len;
            }
            r
        }
        Op::SliceCols(x, start) => {
            let t = val(*x);
            let (rows, c, w) = (t.rows(), t.cols(), g.cols());
            let mut data = vec![0.0; rows * c];
            for p in 0..rows {
                data[p * c + start..p * c + start + w].copy_from_slice(&g.data[p * w..(p + 1) * w]);
            }
            vec![(*x, like(*x, data))]
        }
        Op::SliceRows(x, start) => {
            let t = val(*x);
            let c = t.cols();
            let mut data = vec![0.0; t.numel()];
            data[start * c..start * c + g.numel()].copy_from_slice(&g.data);
            vec![(*x, like(*x, data))]
        }
        Op::BroadcastRows(x) => {
            let c = g.cols();
            let mut data = vec![0.0; c];
            for row in g.data.chunks(c.max(1)) {
                for (d, v) in data.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(*x, like(*x, data))]
        }
        Op::BroadcastCols(x) => {
            let c = g.cols().max(1);
            vec![(*x, like(*x, g.data.chunks(c).map(|r| r.iter().sum()).collect()))]
        }
        Op::AddRow(x, b) => {
            let c = g.cols();
            let mut gb = vec![0.0; c];
            for row in g.data.chunks(c.max(1)) {
                for (d, v) in gb.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(*x, g.clone()), (*b, like(*b, gb))]
        }
        Op::Sum(x) => vec![(*x, like(*x, vec![g.data[0]; val(*x).numel()]))],
        Op::Mean(x) => {
            let n = val(*x).numel();
            vec![(*x, like(*x, vec![g.data[0] / n as f64; n]))]
        }
        Op::SumRows(x) => {
            let t = val(*x);
            let rows = t.rows();
            let mut data = Vec::with_capacity(t.numel());
            for _ in 0..rows {
                data.extend_from_slice(&g.data);
            }
            vec![(*x, like(*x, data))]
        }
        Op::SumCols(x) => {
            let t = val(*x);
            let c = t.cols();
            let mut data = Vec::with_capacity(t.numel());
            for &v in &g.data {
                data.extend(core::iter::repeat(v).take(c));
            }
            vec![(*x, like(*x, data))]
        }
        Op::Relu(x) => vec![(*x, zip(g, val(*x), |gg, v| if v > 0.0 { gg } else { 0.0 }))],
        Op::Sigmoid(x) => vec![(*x, zip(g, out, |gg, s| gg * s * (1.0 - s)))],
        Op::Softplus(x) => vec![(*x, zip(g, val(*x), |gg, v| gg * math::sigmoid(v)))],
        Op::Exp(x) => vec![(*x, zip(g, out, |gg, e| gg * e))],
        Op::Abs(x) => vec![(*x, zip(g, val(*x), |gg, v| if v > 0.0 { gg } else if v < 0.0 { -gg } else { 0.0 }))],
        // d sqrt(x) at x = 0 is taken as 0 rather than infinity.
        Op::Sqrt(x) => vec![(*x, zip(g, out, |gg, s| if s > 0.0 { 0.5 * gg / s } else { 0.0 }))],
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![(*x, zip(g, val(*x), |gg, v| if v > lo && v < hi { gg } else { 0.0 }))]
        }
        Op::GatherRows(x, idx) => {
            let t = val(*x);
            let c = t.cols();
            let mut data = vec![0.0; t.numel()];
            for (p, &j) in idx.iter().enumerate() {
                for q in 0..c {
                    data[j * c + q] += g.data[p * c + q];
                }
            }
            vec![(*x, like(*x, data))]
        }
        Op::ScatterAddRows(x, idx) => {
            let c = g.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &j in idx {
                data.extend_from_slice(&g.data[j * c..(j + 1) * c]);
            }
            vec![(*x, like(*x, data))]
        }
        Op::Reshape(x) => vec![(*x, like(*x, g.data.clone()))],
        Op::Custom(ids, op) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&j| val(j)).collect();
            let need: Vec<bool> = ids.iter().map(|&j| needs(j)).collect();
            let gs = op.backward(&inputs, out, g, &need)?;
            if gs.len() != ids.len() {
                return Err(Error::ShapeMismatch(format!("{} returned {} gradients", op.name(), gs.len())));
            }
            let mut r = Vec::new();
            for (&j, gj) in ids.iter().zip(gs) {
                if let Some(gj) = gj {
                    if gj.numel() != val(j).numel() {
                        return Err(Error::ShapeMismatch(format!("{} gradient shape", op.name())));
                    }
                    r.push((j, like(j, gj.data)));
                }
            }
            r
        }
    };
    Ok(res)
}

struct SpectralDiffuse<'a> {
    basis: &'a Eigenbasis,
    mass: &'a [f64],
    kind: DiffusionKind,
    /// `Phi^T M x`, `k x c`.
    coef: Vec<f64>,
    c: usize,
}

impl CustomOp for SpectralDiffuse<'_> {
    fn name(&self) -> &'static str {
        "spectral_diffuse"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c) = (self.basis, self.c);
        let t = inputs[1];
        // G = Phi^T g
        let mut gc = vec![0.0; b.k * c];
        gemm(b.k, b.n, c, 1.0, &b.vectors, true, &grad.data, false, 0.0, &mut gc);
        let mut gt = None;
        if needs[1] {
            let mut d = vec![0.0; c];
            for j in 0..b.k {
                for ch in 0..c {
                    d[ch] += gc[j * c + ch] * self.coef[j * c + ch] * self.kind.filter_dt(b.values[j], t.data[ch]);
                }
            }
            gt = Some(Tensor { shape: t.shape.clone(), data: d });
        }
        let mut gx = None;
        if needs[0] {
            for j in 0..b.k {
                for ch in 0..c {
                    gc[j * c + ch] *= self.kind.filter(b.values[j], t.data[ch]);
                }
            }
            let mut d = reconstruct(b, &gc, c);
            for (i, row) in d.chunks_mut(c.max(1)).enumerate() {
                for v in row {
                    *v *= self.mass[i];
                }
            }
            gx = Some(Tensor { shape: inputs[0].shape.clone(), data: d });
        }
        Ok(vec![gx, gt])
    }
}

use crate::matrix::Matrix;

use super::{DiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ExpClipped(Var, f64),
    Log(Var),
    Pow(Var, f64),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of matrix-valued operations for reverse-mode
/// differentiation with respect to a flat parameter vector.
///
/// Nodes are stored in creation order, which is a topological order, and
/// [`backward`](Tape::backward) visits them once in reverse.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    clipped: usize,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sum `g` down to shape `(rows, cols)` along broadcast axes.
fn reduce_to(g: &Matrix, rows: usize, cols: usize) -> Matrix {
    if g.shape() == (rows, cols) {
        return g.clone();
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (ri, cj) = (if rows == 1 { 0 } else { i }, if cols == 1 { 0 } else { j });
            out.as_mut_slice()[ri * cols + cj] += g.get(i, j);
        }
    }
    out
}

fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let i = if m.rows() == 1 { 0 } else { i };
    let j = if m.cols() == 1 { 0 } else { j };
    m.get(i, j)
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(
        m.rows(),
        m.cols(),
        m.as_slice().iter().map(|&x| f(x)).collect(),
    )
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let bs = b.as_slice();
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bs[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    debug_assert_eq!(k, b.rows());
    Matrix::from_vec(n, m, out)
}

/// `a^T (k x n) * g (n x m)`.
fn matmul_tn(a: &Matrix, g: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = g.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Matrix::from_vec(k, m, out)
}

/// `g (n x m) * b^T (m x k)`.
fn matmul_nt(g: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = g.row(i);
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(m, b.cols());
    Matrix::from_vec(n, k, out)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape whose gradients are taken with respect to `n_params` parameters.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_params,
            clipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// Number of elements that took the linear branch of `exp_clipped`.
    pub fn clip_count(&self) -> usize {
        self.clipped
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    /// A leaf whose gradient lands at `offset..offset + value.len()`.
    pub fn param(&mut self, value: Matrix, offset: usize) -> Result<Var> {
        if offset + value.len() > self.n_params {
            return Err(DiffError::ParamRange {
                offset,
                len: value.len(),
                n_params: self.n_params,
            });
        }
        Ok(self.push(value, Op::Param { offset }))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape_err = || DiffError::Shape {
            op: "broadcast",
            left: va.shape(),
            right: vb.shape(),
        };
        let rows = broadcast_dim(va.rows(), vb.rows()).ok_or_else(shape_err)?;
        let cols = broadcast_dim(va.cols(), vb.cols()).ok_or_else(shape_err)?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.as_mut_slice()[i * cols + j] = f(bget(va, i, j), bget(vb, i, j));
            }
        }
        if matches!(kind, Binary::Div) && vb.as_slice().iter().any(|&y| y == 0.0) {
            return Err(DiffError::Domain("division by zero"));
        }
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    /// Elementwise `a + b`; either side may broadcast along a unit axis.
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::Shift(a))
    }

    /// `exp(u)` for `u <= t`, `e^t (u - t + 1)` beyond; C1 at `u = t`.
    pub fn exp_clipped(&mut self, a: Var, t: f64) -> Var {
        let va = self.value(a);
        let n = va.as_slice().iter().filter(|&&u| u > t).count();
        let v = map(va, |u| crate::psr::exp_clipped(u, t));
        self.clipped += n;
        self.push(v, Op::ExpClipped(a, t))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.as_slice().iter().any(|&x| !(x > 0.0)) {
            return Err(DiffError::Domain("log of a non-positive value"));
        }
        let v = map(va, f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    /// `a^p`; non-integer `p` needs positive input.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let va = self.value(a);
        if p.fract() != 0.0 && va.as_slice().iter().any(|&x| !(x > 0.0)) {
            return Err(DiffError::Domain(
                "fractional power of a non-positive value",
            ));
        }
        let v = map(va, |x| x.powf(p));
        Ok(self.push(v, Op::Pow(a, p)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Pow(a, 2.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `log(1 + e^a)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), softplus);
        self.push(v, Op::Softplus(a))
    }

    /// `a (n x k) * w (k x m)`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        if va.cols() != vw.rows() {
            return Err(DiffError::Shape {
                op: "matmul",
                left: va.shape(),
                right: vw.shape(),
            });
        }
        let v = matmul(va, vw);
        Ok(self.push(v, Op::MatMul(a, w)))
    }

    /// Matrix-vector product with the vector as a column.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.matmul(w, x)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, `n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::column(va.iter_rows().map(|r| r.iter().sum()).collect());
        self.push(v, Op::SumRows(a))
    }

    /// Per-row `log sum exp`, `n x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::column(va.iter_rows().map(crate::dist::log_sum_exp).collect());
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(DiffError::Shape {
                op: "slice_cols",
                left: va.shape(),
                right: (start, end),
            });
        }
        let rows: Vec<Vec<f64>> = va.iter_rows().map(|r| r[start..end].to_vec()).collect();
        let v = Matrix::from_vec(va.rows(), end - start, rows.concat());
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Column of the row-major entries of `a` at the flat positions `idx`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.len()) {
            return Err(DiffError::Shape {
                op: "gather",
                left: va.shape(),
                right: (bad, 1),
            });
        }
        let v = Matrix::column(idx.iter().map(|&i| va.as_slice()[i]).collect());
        Ok(self.push(v, Op::Gather(a, idx.to_vec())))
    }

    /// Same entries in row-major order, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(DiffError::Shape {
                op: "reshape",
                left: va.shape(),
                right: (rows, cols),
            });
        }
        let v = Matrix::from_vec(rows, cols, va.as_slice().to_vec());
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Unclipped `exp`.
    pub fn exp(&mut self, a: Var) -> Var {
        self.exp_clipped(a, f64::INFINITY)
    }

    /// Gradient of the scalar node `out` with respect to every parameter leaf.
    pub fn backward(&self, out: Var) -> Result<Vec<f64>> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(DiffError::NonScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::scalar(1.0));
        let mut result = vec![0.0; self.n_params];

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (r, v) in result[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g.as_slice())
                    {
                        *r += v;
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (rows, cols) = g.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    let mut gb = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.get(r, c);
                            let (x, y) = (bget(va, r, c), bget(vb, r, c));
                            let (da, db) = match kind {
                                Binary::Add => (gv, gv),
                                Binary::Sub => (gv, -gv),
                                Binary::Mul => (gv * y, gv * x),
                                Binary::Div => (gv / y, -gv * x / (y * y)),
                            };
                            ga.as_mut_slice()[r * cols + c] = da;
                            gb.as_mut_slice()[r * cols + c] = db;
                        }
                    }
                    acc(&mut grads, *a, reduce_to(&ga, va.rows(), va.cols()));
                    acc(&mut grads, *b, reduce_to(&gb, vb.rows(), vb.cols()));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, map(&g, |v| c * v)),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::ExpClipped(a, t) => {
                    let t = *t;
                    let d = map(self.value(*a), |u| if u > t { t.exp() } else { u.exp() });
                    acc(&mut grads, *a, zip_map(&g, &d, |g, d| g * d));
                }
                Op::Log(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| g / x)),
                Op::Pow(a, p) => {
                    let p = *p;
                    let d = map(self.value(*a), |x| p * x.powf(p - 1.0));
                    acc(&mut grads, *a, zip_map(&g, &d, |g, d| g * d));
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, x, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Softplus(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| g * sigmoid(x)),
                ),
                Op::MatMul(a, w) => {
                    let (va, vw) = (self.value(*a), self.value(*w));
                    acc(&mut grads, *a, matmul_nt(&g, vw));
                    acc(&mut grads, *w, matmul_tn(va, &g));
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Matrix::filled(va.rows(), va.cols(), g.as_slice()[0]),
                    );
                }
                Op::SumRows(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let gv = g.as_slice()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v = gv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let (gv, lse) = (g.as_slice()[r], x.as_slice()[r]);
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = if lse == f64::NEG_INFINITY {
                                0.0
                            } else {
                                gv * (v - lse).exp()
                            };
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let va = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_vec(va.rows(), va.cols(), g.into_vec()),
                    );
                }
                Op::Gather(a, idx) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for (&i, &gv) in idx.iter().zip(g.as_slice()) {
                        ga.as_mut_slice()[i] += gv;
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(result)
    }
}

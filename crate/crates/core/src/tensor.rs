//! Dense row-major fp64 matrices with reverse-mode automatic differentiation.
//!
//! Every value is a 2D matrix; vectors are `1 x n` and scalars `1 x 1`.
//! Operations record their parents and a backward rule when any input
//! requires a gradient. [`Tensor::backward`] walks the recorded DAG in
//! reverse topological order (depth-first post-order) and sums gradient
//! contributions for shared subexpressions.
//!
//! A graph is built from `Rc` nodes and is confined to the thread that
//! created it. Plain numeric data that must cross threads lives in
//! [`Matrix`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

/// Epsilon added to the denominators of cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward needs a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Plain owned matrix, `Send + Sync`, used for parameters and datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "matrix",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Vec<f64>>>;

struct Node {
    id: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A node in a reverse-mode autodiff graph. Cloning is cheap (shared).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

/// Gradients produced by [`Tensor::backward`], keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros when no path reached it.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn transpose_buf(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// `out[m x n] = a[m x k] * b[k x n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m x n] = a[m x k] * b[n x k]^T`
fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// `out[k x n] = a[m x k]^T * b[m x n]`
fn gemm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn leaf(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            rows,
            cols,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        if !requires_grad {
            return Self::leaf(rows, cols, data, false);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            rows,
            cols,
            data,
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    /// Constant (no gradient) tensor.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self::leaf(rows, cols, data, false))
    }

    /// Leaf tensor that receives gradients.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(rows, cols, data)?;
        Ok(Self::leaf(t.0.rows, t.0.cols, t.0.data.clone(), true))
    }

    pub fn constant(m: &Matrix) -> Self {
        Self::leaf(m.rows, m.cols, m.data.clone(), false)
    }

    pub fn variable(m: &Matrix) -> Self {
        Self::leaf(m.rows, m.cols, m.data.clone(), true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(1, 1, vec![v], false)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::leaf(rows, cols, vec![0.0; rows * cols], false)
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::leaf(1, v.len(), v.to_vec(), false)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.data[r * self.0.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.0.data[r * self.0.cols..(r + 1) * self.0.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.0.rows,
            cols: self.0.cols,
            data: self.0.data.clone(),
        }
    }

    /// Detached copy: same values, no gradient history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.rows, self.0.cols, self.0.data.clone(), false)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let out = gemm(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = gemm_bt(g, b.data(), m, n, k);
                let gb = gemm_at(a.data(), g, m, k, n);
                vec![ga, gb]
            }),
        ))
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape();
        let (n, k2) = other.shape();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: (m, k),
                rhs: (n, k2),
            });
        }
        let out = gemm_bt(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                // out = A B^T: dA = G B, dB = G^T A
                let ga = gemm(g, b.data(), m, n, k);
                let gb = gemm_at(g, a.data(), m, n, k);
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let out = transpose_buf(self.data(), r, c);
        Tensor::from_op(
            c,
            r,
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![transpose_buf(g, c, r)]),
        )
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let (r, c) = self.shape();
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        let (r, c) = self.shape();
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![g.to_vec(), g.iter().map(|x| -x).collect()]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let (r, c) = self.shape();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same("div", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        let (r, c) = self.shape();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g / b).collect();
                let gb = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * s).collect();
        let (r, c) = self.shape();
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![g.iter().map(|x| x * s).collect()]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + s).collect();
        let (r, c) = self.shape();
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![g.to_vec()]),
        )
    }

    /// Multiply every entry by a learnable `1 x 1` tensor.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let sv = s.item();
        let out = self.data().iter().map(|x| x * sv).collect();
        let (r, c) = self.shape();
        let a = self.clone();
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _| {
                let ga = g.iter().map(|x| x * sv).collect();
                let gs = g.iter().zip(a.data()).map(|(g, a)| g * a).sum();
                vec![ga, vec![gs]]
            }),
        ))
    }

    /// Broadcast-add a `1 x c` row to every row (bias).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.shape();
        if row.shape() != (1, c) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: (r, c),
                rhs: row.shape(),
            });
        }
        let mut out = self.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
                *o += b;
            }
        }
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (b, x) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *b += x;
                    }
                }
                vec![g.to_vec(), gb]
            }),
        ))
    }

    /// Broadcast-multiply each row `i` by the scalar `col[i]` (`col` is `r x 1`).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (r, c) = self.shape();
        if col.shape() != (r, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: (r, c),
                rhs: col.shape(),
            });
        }
        let mut out = self.data().to_vec();
        for i in 0..r {
            let s = col.data()[i];
            for o in &mut out[i * c..(i + 1) * c] {
                *o *= s;
            }
        }
        let (a, v) = (self.clone(), col.clone());
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g, _| {
                let mut ga = g.to_vec();
                let mut gv = vec![0.0; r];
                for i in 0..r {
                    let s = v.data()[i];
                    let gr = &g[i * c..(i + 1) * c];
                    let ar = &a.data()[i * c..(i + 1) * c];
                    gv[i] = gr.iter().zip(ar).map(|(g, a)| g * a).sum();
                    for x in &mut ga[i * c..(i + 1) * c] {
                        *x *= s;
                    }
                }
                vec![ga, gv]
            }),
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let (r, c) = self.shape();
        let a = self.clone();
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                vec![g
                    .iter()
                    .zip(a.data().iter().zip(y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect()]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `x * sigmoid(x)`
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid_f(x),
            |x, _| {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            1,
            1,
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(TensorError::EmptyInput("mean"));
        }
        Ok(self.sum().scale(1.0 / self.len() as f64))
    }

    /// Column-wise sum over rows, `r x c -> 1 x c` (sum readout).
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if r == 0 {
            return Err(TensorError::EmptyInput("sum_rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        Ok(Tensor::from_op(
            1,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend_from_slice(g);
                }
                vec![ga]
            }),
        ))
    }

    /// Row-wise sum, `r x c -> r x 1`.
    pub fn row_sum(&self) -> Tensor {
        let (r, c) = self.shape();
        let out = (0..r).map(|i| self.row(i).iter().sum()).collect();
        Tensor::from_op(
            r,
            1,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for x in &mut ga[i * c..(i + 1) * c] {
                        *x = g[i];
                    }
                }
                vec![ga]
            }),
        )
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> Tensor {
        let s = self.data().iter().map(|x| x * x).sum();
        let a = self.clone();
        Tensor::from_op(
            1,
            1,
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![a.data().iter().map(|x| 2.0 * g[0] * x).collect()]),
        )
    }

    /// Row-wise Euclidean norm, `r x c -> r x 1`. Zero rows get a zero gradient.
    pub fn l2_norm(&self) -> Tensor {
        let (r, c) = self.shape();
        let out: Vec<f64> = (0..r)
            .map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let a = self.clone();
        Tensor::from_op(
            r,
            1,
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    if y[i] > 0.0 {
                        let s = g[i] / y[i];
                        for j in 0..c {
                            ga[i * c + j] = s * a.data()[i * c + j];
                        }
                    }
                }
                vec![ga]
            }),
        )
    }

    // ---- structural ----

    /// Concatenate along `axis` (0 = stack rows, 1 = append columns).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat"));
        }
        if axis == 0 {
            Self::concat_rows(parts)
        } else {
            Self::concat_cols(parts)
        }
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts
            .first()
            .ok_or(TensorError::EmptyInput("concat_rows"))?
            .cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            if p.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            offsets.push(data.len());
            data.extend_from_slice(p.data());
        }
        let rows = parts.iter().map(Tensor::rows).sum();
        let lens: Vec<usize> = parts.iter().map(Tensor::len).collect();
        Ok(Tensor::from_op(
            rows,
            c,
            data,
            parts.to_vec(),
            Box::new(move |g, _| {
                offsets
                    .iter()
                    .zip(&lens)
                    .map(|(&o, &l)| g[o..o + l].to_vec())
                    .collect()
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let r = parts
            .first()
            .ok_or(TensorError::EmptyInput("concat_cols"))?
            .rows();
        for p in parts {
            if p.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::from_op(
            r,
            total,
            data,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(r * w)).collect();
                for i in 0..r {
                    let mut off = i * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Column slice `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start > end || end > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: (r, c),
                rhs: (start, end),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Tensor::from_op(
            r,
            w,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![ga]
            }),
        ))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, len: r });
            }
            data.extend_from_slice(self.row(i));
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(
            index.len(),
            c,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
                vec![ga]
            }),
        ))
    }

    /// Scatter-add rows into `segments` output rows: `out[segment[k]] += self[k]`.
    pub fn segment_sum(&self, segment: &[usize], segments: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if segment.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                lhs: (r, c),
                rhs: (segment.len(), 1),
            });
        }
        let mut out = vec![0.0; segments * c];
        for (k, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::IndexOutOfRange {
                    index: s,
                    len: segments,
                });
            }
            for j in 0..c {
                out[s * c + j] += self.data()[k * c + j];
            }
        }
        let segment = segment.to_vec();
        Ok(Tensor::from_op(
            segments,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(r * c);
                for &s in &segment {
                    ga.extend_from_slice(&g[s * c..(s + 1) * c]);
                }
                vec![ga]
            }),
        ))
    }

    // ---- attention / similarity ----

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteInput("softmax_rows"));
        }
        let (r, c) = self.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = self.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for x in &mut out[i * c..(i + 1) * c] {
                *x /= z;
            }
        }
        Ok(Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![ga]
            }),
        ))
    }

    /// Column-wise softmax (each column sums to one).
    pub fn softmax_cols(&self) -> Result<Tensor> {
        Ok(self.transpose().softmax_rows()?.transpose())
    }

    /// Pairwise cosine similarity of rows: `P_ij = <x_i, x_j> / (|x_i||x_j| + 1e-12)`.
    pub fn cosine_similarity(&self) -> Tensor {
        let (n, c) = self.shape();
        let x = self.data();
        let norms: Vec<f64> = (0..n)
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let gram = gemm_bt(x, x, n, c, n);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = gram[i * n + j] / (norms[i] * norms[j] + COSINE_EPS);
            }
        }
        let a = self.clone();
        Tensor::from_op(
            n,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                // dX = (W + W^T) X - u * ((V + V^T) n)
                //   W_ij = G_ij / d_ij, V_ij = G_ij g_ij / d_ij^2, u_k = x_k / |x_k|
                let mut w = vec![0.0; n * n];
                let mut cvec = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let d = norms[i] * norms[j] + COSINE_EPS;
                        let gij = g[i * n + j];
                        w[i * n + j] += gij / d;
                        let v = gij * gram[i * n + j] / (d * d);
                        cvec[i] += v * norms[j];
                        cvec[j] += v * norms[i];
                    }
                }
                let mut wsym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        wsym[i * n + j] = w[i * n + j] + w[j * n + i];
                    }
                }
                let mut ga = gemm(&wsym, a.data(), n, n, c);
                for k in 0..n {
                    if norms[k] > 0.0 {
                        let s = cvec[k] / norms[k];
                        for j in 0..c {
                            ga[k * c + j] -= s * a.data()[k * c + j];
                        }
                    }
                }
                vec![ga]
            }),
        )
    }

    /// Row-paired cosine: `out_i = <a_i, b_i> / (|a_i||b_i| + 1e-12)`, `r x 1`.
    pub fn row_cosine(&self, other: &Tensor) -> Result<Tensor> {
        check_same("row_cosine", self, other)?;
        let dot = self.mul(other)?.row_sum();
        let denom = self.l2_norm().mul(&other.l2_norm())?.add_scalar(COSINE_EPS);
        dot.div(&denom)
    }

    // ---- probabilistic ----

    /// Closed-form `KL(N(mu1, e^lv1) || N(mu2, e^lv2))` for diagonal Gaussians, summed.
    pub fn gaussian_kl(mu1: &Tensor, lv1: &Tensor, mu2: &Tensor, lv2: &Tensor) -> Result<Tensor> {
        check_same("gaussian_kl", mu1, lv1)?;
        check_same("gaussian_kl", mu1, mu2)?;
        check_same("gaussian_kl", mu1, lv2)?;
        let n = mu1.len();
        let mut kl = 0.0;
        for k in 0..n {
            let (m1, l1, m2, l2) = (mu1.data()[k], lv1.data()[k], mu2.data()[k], lv2.data()[k]);
            let dm = m2 - m1;
            kl += 0.5 * ((l1 - l2).exp() + dm * dm * (-l2).exp() - 1.0 + l2 - l1);
        }
        let (a, b, c, d) = (mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone());
        Ok(Tensor::from_op(
            1,
            1,
            vec![kl],
            vec![mu1.clone(), lv1.clone(), mu2.clone(), lv2.clone()],
            Box::new(move |g, _| {
                let g = g[0];
                let mut gm1 = vec![0.0; n];
                let mut gl1 = vec![0.0; n];
                let mut gm2 = vec![0.0; n];
                let mut gl2 = vec![0.0; n];
                for k in 0..n {
                    let (m1, l1, m2, l2) = (a.data()[k], b.data()[k], c.data()[k], d.data()[k]);
                    let dm = m2 - m1;
                    let inv2 = (-l2).exp();
                    let r = (l1 - l2).exp();
                    gm1[k] = -g * dm * inv2;
                    gm2[k] = g * dm * inv2;
                    gl1[k] = g * 0.5 * (r - 1.0);
                    gl2[k] = g * 0.5 * (-r - dm * dm * inv2 + 1.0);
                }
                vec![gm1, gl1, gm2, gl2]
            }),
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a `1 x 1` root.
    pub fn backward(&self) -> Result<Gradients> {
        if self.shape() != (1, 1) {
            return Err(TensorError::NonScalarRoot(self.shape()));
        }
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return Ok(grads);
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(bw) = &t.0.backward {
                let pgrads = bw(&g, &t.0.data);
                for (p, gp) in t.0.parents.iter().zip(pgrads) {
                    if !p.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&p.id()) {
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&gp) {
                                *a += x;
                            }
                        }
                        None => {
                            pending.insert(p.id(), gp);
                        }
                    }
                }
            } else {
                grads.map.insert(t.id(), g);
            }
        }
        Ok(grads)
    }

    /// Depth-first post-order over nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

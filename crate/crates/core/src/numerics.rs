//! Dense linear algebra used by every other module: row-major matrices,
//! regularized Cholesky factorization, SPD solves, power-iteration spectral
//! norms, and rank statistics.
//!
//! Everything is `f64`; estimating similarity statistics at lower precision
//! is unreliable. All randomized routines take an explicit seed so results
//! are reproducible bit-for-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Relative pivot tolerance for Cholesky: a pivot below
/// `PIVOT_RTOL * max_diag` is treated as not positive definite rather than
/// silently producing a garbage factor.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Error type for numerics operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// A Cholesky pivot was non-positive (after regularization); the matrix
    /// is numerically not positive definite.
    NotPositiveDefinite { index: usize, pivot: f64 },
    /// Input vectors/matrices have incompatible dimensions.
    DimensionMismatch { expected: usize, got: usize },
    /// The input is degenerate for the requested statistic (e.g. a constant
    /// vector has no rank ordering).
    DegenerateInput(String),
    /// A non-finite value was found where finite data is required.
    NonFinite { context: &'static str },
}

impl std::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NumericsError::NotPositiveDefinite { index, pivot } => {
                write!(f, "matrix is not positive definite (pivot {pivot:e} at index {index})")
            }
            NumericsError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            NumericsError::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            NumericsError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
        }
    }
}

impl std::error::Error for NumericsError {}

/// A dense matrix stored in row-major order: `data[r * cols + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Creates a matrix from row-major data.
    ///
    /// # Errors
    /// `DimensionMismatch` if `data.len() != rows * cols`; `NonFinite` if any
    /// entry is NaN or infinite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "DenseMatrix::new" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix-vector product `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if x.len() != self.cols {
            return Err(NumericsError::DimensionMismatch { expected: self.cols, got: x.len() });
        }
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            y[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(y)
    }

    /// Matrix product `A B`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.data[k * other.cols + c];
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A symmetric matrix stored as a full square, kept symmetric by
/// construction: mutation goes through [`SymmetricMatrix::set`], which writes
/// both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    /// Builds from full row-major data, which must already be exactly
    /// symmetric and finite.
    pub fn from_full(dim: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != dim * dim {
            return Err(NumericsError::DimensionMismatch { expected: dim * dim, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "SymmetricMatrix::from_full" });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if data[i * dim + j] != data[j * dim + i] {
                    return Err(NumericsError::DegenerateInput(format!(
                        "asymmetric entry at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = *v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets `(i, j)` and `(j, i)` together.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum of all entries, `1ᵀ Q 1`.
    pub fn grand_sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row sums, `Q 1`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.data[i * self.dim..(i + 1) * self.dim].iter().sum())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Quadratic form `xᵀ Q x`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64, NumericsError> {
        if x.len() != self.dim {
            return Err(NumericsError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            let mut s = 0.0;
            for j in 0..self.dim {
                s += row[j] * x[j];
            }
            acc += x[i] * s;
        }
        Ok(acc)
    }

    /// Extracts the principal submatrix indexed by `idx` (sorted, unique).
    pub fn submatrix(&self, idx: &[usize]) -> SymmetricMatrix {
        let k = idx.len();
        let mut out = SymmetricMatrix::zeros(k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.data[a * k + b] = self.get(i, j);
            }
        }
        out
    }
}

/// A lower-triangular Cholesky factor, stored packed row-major:
/// `data[i * (i + 1) / 2 + j]` holds `L[i][j]` for `j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        self.data[i * (i + 1) / 2 + j]
    }

    /// Row `i` of the factor (entries `L[i][0..=i]`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1]
    }

    /// Squared Euclidean norm of row `i`.
    pub fn row_norm_sq(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum()
    }

    /// Reconstructs `L Lᵀ` as a symmetric matrix.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let n = self.dim;
        let mut out = SymmetricMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j.min(i) {
                    s += self.get(i, k) * self.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Solves `L y = b` (forward substitution).
    pub fn forward_solve(&self, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if b.len() != self.dim {
            return Err(NumericsError::DimensionMismatch { expected: self.dim, got: b.len() });
        }
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut s = b[i];
            for j in 0..i {
                s -= self.get(i, j) * y[j];
            }
            y[i] = s / self.get(i, i);
        }
        Ok(y)
    }

    /// Solves `Lᵀ x = y` (back substitution).
    pub fn backward_solve(&self, y: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if y.len() != self.dim {
            return Err(NumericsError::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        let mut x = vec![0.0; self.dim];
        for i in (0..self.dim).rev() {
            let mut s = y[i];
            for j in (i + 1)..self.dim {
                s -= self.get(j, i) * x[j];
            }
            x[i] = s / self.get(i, i);
        }
        Ok(x)
    }
}

/// Cholesky factorization of `Q + lambda I`.
///
/// The relative pivot tolerance distinguishes genuinely rank-deficient
/// matrices from roundoff: a pivot below `PIVOT_RTOL * max_diag` fails with
/// [`NumericsError::NotPositiveDefinite`] instead of producing NaNs.
///
/// # Errors
/// `NotPositiveDefinite` when a pivot is non-positive even after
/// regularization.
pub fn cholesky_regularized(
    q: &SymmetricMatrix,
    lambda: f64,
) -> Result<LowerTriangular, NumericsError> {
    assert!(lambda >= 0.0, "regularization must be non-negative");
    let n = q.dim();
    let max_diag = (0..n).map(|i| q.get(i, i) + lambda).fold(0.0_f64, f64::max);
    let tol = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);
    let mut data = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        for j in 0..=i {
            let mut s = q.get(i, j) + if i == j { lambda } else { 0.0 };
            for k in 0..j {
                s -= data[i * (i + 1) / 2 + k] * data[j * (j + 1) / 2 + k];
            }
            if i == j {
                if s <= tol {
                    return Err(NumericsError::NotPositiveDefinite { index: i, pivot: s });
                }
                data[i * (i + 1) / 2 + j] = s.sqrt();
            } else {
                data[i * (i + 1) / 2 + j] = s / data[j * (j + 1) / 2 + j];
            }
        }
    }
    Ok(LowerTriangular { dim: n, data })
}

/// Solves `(Q + lambda I) x = b` for symmetric positive definite `Q`.
///
/// # Errors
/// Propagates `NotPositiveDefinite` from the factorization.
pub fn solve_spd(q: &SymmetricMatrix, b: &[f64], lambda: f64) -> Result<Vec<f64>, NumericsError> {
    if b.len() != q.dim() {
        return Err(NumericsError::DimensionMismatch { expected: q.dim(), got: b.len() });
    }
    let factor = cholesky_regularized(q, lambda)?;
    let y = factor.forward_solve(b)?;
    factor.backward_solve(&y)
}

/// Largest singular value of `w`, estimated by power iteration on `WᵀW`.
///
/// Deterministic for a fixed seed. Stops early once the relative change in
/// the estimate drops below `tol`. A zero matrix returns 0.
pub fn spectral_norm(w: &DenseMatrix, iters: usize, tol: f64, seed: u64) -> f64 {
    assert!(iters >= 1, "need at least one iteration");
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return 0.0;
    }
    if w.data().iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|a| *a /= nv);
    }
    let wt = w.transpose();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let wv = w.matvec(&v).expect("dims checked");
        let mut next = wt.matvec(&wv).expect("dims checked");
        let nn = norm(&next);
        if nn == 0.0 {
            // v landed in the null space; the estimate so far stands.
            break;
        }
        next.iter_mut().for_each(|a| *a /= nn);
        let new_sigma = norm(&w.matvec(&next).expect("dims checked"));
        let done = (new_sigma - sigma).abs() <= tol * new_sigma.max(f64::MIN_POSITIVE);
        sigma = new_sigma;
        v = next;
        if done {
            break;
        }
    }
    sigma
}

/// Average ranks of `x`, with ties assigned the mean of their positions
/// (1-based).
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between `a` and `b`, with average ranks for
/// ties.
///
/// # Errors
/// `DegenerateInput` if either vector is constant (no rank ordering exists),
/// `DimensionMismatch` for unequal lengths.
pub fn spearman_rank(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(NumericsError::DegenerateInput("need at least 2 observations".into()));
    }
    let constant = |x: &[f64]| x.iter().all(|v| *v == x[0]);
    if constant(a) || constant(b) {
        return Err(NumericsError::DegenerateInput("constant vector has no ranks".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

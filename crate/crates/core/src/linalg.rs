//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// How much diagonal jitter to add before a Cholesky factorization.
///
/// Jitter is relative to the mean diagonal. Attempts start at `initial`
/// (zero means "try the matrix as is first"), then `first_escalation`, and
/// grow ×10 until `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub initial: f64,
    pub first_escalation: f64,
    pub max: f64,
}

impl JitterPolicy {
    /// Gram matrices inside latent-variable models: always jittered.
    pub const ALWAYS: JitterPolicy = JitterPolicy {
        initial: 1e-8,
        first_escalation: 1e-7,
        max: 1e-2,
    };
    /// Regression covariances: exact factorization unless it fails.
    pub const ON_FAILURE: JitterPolicy = JitterPolicy {
        initial: 0.0,
        first_escalation: 1e-8,
        max: 1e-2,
    };
}

/// A Cholesky factor plus the absolute jitter that was added to get it.
#[derive(Debug, Clone)]
pub struct JitteredChol {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredChol {
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
    pub fn ln_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

pub fn mean_diag(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1);
    let m = a.diagonal().iter().sum::<f64>() / n as f64;
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Cholesky with jitter escalation.
pub fn cholesky_jittered(a: &DMatrix<f64>, policy: JitterPolicy) -> Result<JitteredChol> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!("cholesky of {}x{} matrix", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::linalg("non-finite entry in matrix to factorize"));
    }
    let scale = mean_diag(a);
    let mut rel = policy.initial;
    loop {
        let jitter = rel * scale;
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredChol { chol, jitter });
        }
        rel = if rel == 0.0 { policy.first_escalation } else { rel * 10.0 };
        if rel > policy.max * (1.0 + 1e-9) {
            return Err(Error::linalg(format!(
                "matrix of size {} not positive definite with relative jitter up to {:e}",
                a.nrows(),
                policy.max
            )));
        }
    }
}

/// (A + Aᵀ)/2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    m
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric matrix function via eigendecomposition.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Clip negative eigenvalues to zero.
pub fn clip_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |l| l.max(0.0))
}

/// Copy row `i` of a matrix into a vector.
pub fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

/// Build an `n×q` matrix from row slices.
pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, q, |i, j| rows[i][j])
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbour distance of every row (excluding itself).
pub fn nearest_neighbor_distances(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_vec(points, i)).collect();
    (0..n)
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if j != i {
                    best = best.min(sq_dist(&rows[i], &rows[j]));
                }
            }
            best.sqrt()
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

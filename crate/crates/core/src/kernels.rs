//! RBF covariance with optional ARD, its coordinate derivatives, and the
//! Ψ statistics of the kernel under a diagonal Gaussian over its inputs.
//!
//! Convention: `k(a, b) = γ exp(-Σ_d ρ_d (a_d - b_d)²)` with `ρ_d` the
//! inverse squared lengthscale. Derivatives with respect to the second
//! argument `x*` use `∂k/∂x*_l = 2ρ_l (a_l - x*_l) k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub gamma: f64,
    /// One value when isotropic, one per latent dimension with ARD.
    pub rho: Vec<f64>,
    pub ard: bool,
}

impl RbfParams {
    pub fn isotropic(gamma: f64, rho: f64) -> Result<Self> {
        let p = RbfParams { gamma, rho: vec![rho], ard: false };
        p.validate(None)?;
        Ok(p)
    }

    pub fn ard(gamma: f64, rho: Vec<f64>) -> Result<Self> {
        let p = RbfParams { gamma, rho, ard: true };
        p.validate(None)?;
        Ok(p)
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(format!("signal variance must be positive, got {}", self.gamma)));
        }
        if self.rho.is_empty() || self.rho.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::param(format!("inverse squared lengthscales must be positive, got {:?}", self.rho)));
        }
        if !self.ard && self.rho.len() != 1 {
            return Err(Error::param("isotropic kernel carries exactly one lengthscale"));
        }
        if let (true, Some(q)) = (self.ard, dim) {
            if self.rho.len() != q {
                return Err(Error::shape(format!("ARD kernel has {} lengthscales for dimension {q}", self.rho.len())));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn rho_at(&self, d: usize) -> f64 {
        if self.ard {
            self.rho[d]
        } else {
            self.rho[0]
        }
    }

    /// ρ expanded to one value per dimension.
    pub fn rho_vec(&self, q: usize) -> Vec<f64> {
        (0..q).map(|d| self.rho_at(d)).collect()
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for d in 0..a.len() {
            let diff = a[d] - b[d];
            s += self.rho_at(d) * diff * diff;
        }
        self.gamma * (-s).exp()
    }

    fn check_dim(&self, q: usize, what: &str) -> Result<()> {
        self.validate(Some(q))?;
        if q == 0 {
            return Err(Error::shape(format!("{what}: zero-dimensional points")));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over a set of latent points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalGaussian {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl VariationalGaussian {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(Error::shape(format!(
                "means {:?} and variances {:?} differ in shape",
                means.shape(),
                variances.shape()
            )));
        }
        if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain("variational variances must be finite and non-negative"));
        }
        Ok(VariationalGaussian { means, variances })
    }

    pub fn point_masses(means: DMatrix<f64>) -> Self {
        let variances = DMatrix::zeros(means.nrows(), means.ncols());
        VariationalGaussian { means, variances }
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| crate::linalg::row_vec(m, i)).collect()
}

/// Gram matrix `K(A, B)`; rows are assembled independently.
pub fn kernel_matrix(params: &RbfParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("kernel inputs of dimension {} and {}", a.ncols(), b.ncols())));
    }
    params.check_dim(a.ncols(), "kernel_matrix")?;
    let ar = rows_of(a);
    let br = rows_of(b);
    let rows = exec::map_range(ar.len(), |i| br.iter().map(|bj| params.eval(&ar[i], bj)).collect::<Vec<_>>());
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| rows[i][j]))
}

/// `∂k(x_i, x*)/∂x*_l` for every row `x_i` of `x`, shape `|X|×q`.
pub fn kernel_grad_cross(params: &RbfParams, x: &DMatrix<f64>, x_star: &[f64]) -> Result<DMatrix<f64>> {
    let q = x_star.len();
    if x.ncols() != q {
        return Err(Error::shape(format!("points of dimension {} vs x* of dimension {q}", x.ncols())));
    }
    params.check_dim(q, "kernel_grad_cross")?;
    let mut out = DMatrix::zeros(x.nrows(), q);
    for i in 0..x.nrows() {
        let xi = crate::linalg::row_vec(x, i);
        let k = params.eval(&xi, x_star);
        for l in 0..q {
            out[(i, l)] = 2.0 * params.rho_at(l) * (xi[l] - x_star[l]) * k;
        }
    }
    Ok(out)
}

/// Covariance of the gradient of the latent function with itself at one
/// point: `diag(2ρ_r γ)`.
pub fn kernel_hess_at_star(params: &RbfParams, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |r, l| if r == l { 2.0 * params.rho_at(r) * params.gamma } else { 0.0 })
}

/// `∂²k(x_i, x*)/∂x_i^r ∂x*^l`, one `q×q` block per row of `x`.
pub fn kernel_grad_grad_cross(params: &RbfParams, x: &DMatrix<f64>, x_star: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let q = x_star.len();
    if x.ncols() != q {
        return Err(Error::shape(format!("points of dimension {} vs x* of dimension {q}", x.ncols())));
    }
    params.check_dim(q, "kernel_grad_grad_cross")?;
    Ok((0..x.nrows())
        .map(|i| {
            let xi = crate::linalg::row_vec(x, i);
            let k = params.eval(&xi, x_star);
            DMatrix::from_fn(q, q, |r, l| {
                let (rr, rl) = (params.rho_at(r), params.rho_at(l));
                let (dr, dl) = (xi[r] - x_star[r], xi[l] - x_star[l]);
                let off = -4.0 * rr * rl * dr * dl * k;
                if r == l {
                    2.0 * rr * k + off
                } else {
                    off
                }
            })
        })
        .collect())
}

/// `∂²k(x_i, x*)/∂x*^r ∂x*^l`, the derivative of [`kernel_grad_cross`] in
/// `x*`; equals the negated cross-derivative block.
pub fn kernel_hess_star(params: &RbfParams, x: &DMatrix<f64>, x_star: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    Ok(kernel_grad_grad_cross(params, x, x_star)?.into_iter().map(|m| -m).collect())
}

/// Gradients of a scalar `L` that depends on `K(A, B)` through `dK = ∂L/∂K`.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_gamma: f64,
    pub d_rho: Vec<f64>,
}

pub fn kernel_matrix_backward(
    params: &RbfParams,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    dk: &DMatrix<f64>,
) -> KernelGrads {
    let q = a.ncols();
    let mut d_a = DMatrix::zeros(a.nrows(), q);
    let mut d_b = DMatrix::zeros(b.nrows(), q);
    let mut d_gamma = 0.0;
    let mut d_rho = vec![0.0; params.rho.len()];
    let rho = params.rho_vec(q);
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let g = dk[(i, j)] * k[(i, j)];
            if g == 0.0 {
                continue;
            }
            d_gamma += g / params.gamma;
            for d in 0..q {
                let diff = a[(i, d)] - b[(j, d)];
                let t = 2.0 * rho[d] * diff * g;
                d_a[(i, d)] -= t;
                d_b[(j, d)] += t;
                d_rho[if params.ard { d } else { 0 }] -= diff * diff * g;
            }
        }
    }
    KernelGrads { d_a, d_b, d_gamma, d_rho }
}

/// Expectations of kernel quantities under `q(X)`.
#[derive(Debug, Clone)]
pub struct PsiStats {
    /// `E[tr K_XX] = Nγ`.
    pub psi0: f64,
    /// `E[K_{X,Xu}]`, shape `N×m`.
    pub psi1: DMatrix<f64>,
    /// `E[K_{Xu,X} K_{X,Xu}]`, shape `m×m`.
    pub psi2: DMatrix<f64>,
}

pub fn psi_statistics(params: &RbfParams, qx: &VariationalGaussian, xu: &DMatrix<f64>) -> Result<PsiStats> {
    let q = qx.dim();
    if xu.ncols() != q {
        return Err(Error::shape(format!("inducing inputs of dimension {} vs latent dimension {q}", xu.ncols())));
    }
    if qx.variances.iter().any(|v| *v < 0.0) {
        return Err(Error::domain("negative variational variance"));
    }
    params.check_dim(q, "psi_statistics")?;
    let n = qx.len();
    let m = xu.nrows();
    let rho = params.rho_vec(q);
    let gamma = params.gamma;

    let mut psi1 = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut pre = gamma;
        let mut a = vec![0.0; q];
        for d in 0..q {
            a[d] = 2.0 * rho[d] * qx.variances[(i, d)] + 1.0;
            pre /= a[d].sqrt();
        }
        for j in 0..m {
            let mut e = 0.0;
            for d in 0..q {
                let diff = qx.means[(i, d)] - xu[(j, d)];
                e += rho[d] * diff * diff / a[d];
            }
            psi1[(i, j)] = pre * (-e).exp();
        }
    }

    // per-point prefactors and 1/b terms
    let mut pre2 = vec![0.0; n];
    let mut inv_b = vec![0.0; n * q];
    for i in 0..n {
        let mut pre = gamma * gamma;
        for d in 0..q {
            let b = 4.0 * rho[d] * qx.variances[(i, d)] + 1.0;
            inv_b[i * q + d] = 1.0 / b;
            pre /= b.sqrt();
        }
        pre2[i] = pre;
    }
    let upper = exec::map_range(m, |j| {
        let mut row = vec![0.0; m];
        for (jj, slot) in row.iter_mut().enumerate().skip(j) {
            let mut base = 0.0;
            for d in 0..q {
                let delta = xu[(j, d)] - xu[(jj, d)];
                base += 0.5 * rho[d] * delta * delta;
            }
            let mut acc = 0.0;
            for i in 0..n {
                let mut e = base;
                for d in 0..q {
                    let zbar = 0.5 * (xu[(j, d)] + xu[(jj, d)]);
                    let diff = qx.means[(i, d)] - zbar;
                    e += 2.0 * rho[d] * diff * diff * inv_b[i * q + d];
                }
                acc += pre2[i] * (-e).exp();
            }
            *slot = acc;
        }
        row
    });
    let psi2 = DMatrix::from_fn(m, m, |r, c| if c >= r { upper[r][c] } else { upper[c][r] });
    Ok(PsiStats { psi0: n as f64 * gamma, psi1, psi2 })
}

/// Gradients of a scalar through the Ψ statistics.
#[derive(Debug, Clone)]
pub struct PsiGrads {
    pub d_means: DMatrix<f64>,
    pub d_variances: DMatrix<f64>,
    pub d_xu: DMatrix<f64>,
    pub d_gamma: f64,
    pub d_rho: Vec<f64>,
}

/// Backpropagate `∂L/∂ψ0`, `∂L/∂ψ1`, `∂L/∂ψ2` (entries treated as
/// independent) to the variational parameters, inducing inputs and kernel.
pub fn psi_statistics_backward(
    params: &RbfParams,
    qx: &VariationalGaussian,
    xu: &DMatrix<f64>,
    psi: &PsiStats,
    d_psi0: f64,
    d_psi1: &DMatrix<f64>,
    d_psi2: &DMatrix<f64>,
) -> PsiGrads {
    let q = qx.dim();
    let n = qx.len();
    let m = xu.nrows();
    let rho = params.rho_vec(q);
    let gamma = params.gamma;
    let ri = |d: usize| if params.ard { d } else { 0 };
    let mut d_means = DMatrix::zeros(n, q);
    let mut d_variances = DMatrix::zeros(n, q);
    let mut d_xu = DMatrix::zeros(m, q);
    let mut d_gamma = d_psi0 * n as f64;
    let mut d_rho = vec![0.0; params.rho.len()];

    for i in 0..n {
        for j in 0..m {
            let g = d_psi1[(i, j)] * psi.psi1[(i, j)];
            if g == 0.0 {
                continue;
            }
            d_gamma += g / gamma;
            for d in 0..q {
                let s = qx.variances[(i, d)];
                let a = 2.0 * rho[d] * s + 1.0;
                let diff = qx.means[(i, d)] - xu[(j, d)];
                let t = 2.0 * rho[d] * diff / a;
                d_means[(i, d)] -= g * t;
                d_xu[(j, d)] += g * t;
                d_variances[(i, d)] += g * (-rho[d] / a + 2.0 * rho[d] * rho[d] * diff * diff / (a * a));
                d_rho[ri(d)] += g * (-s / a - diff * diff / (a * a));
            }
        }
    }

    let mut b = vec![0.0; q];
    for i in 0..n {
        let mut pre = gamma * gamma;
        for d in 0..q {
            b[d] = 4.0 * rho[d] * qx.variances[(i, d)] + 1.0;
            pre /= b[d].sqrt();
        }
        for j in 0..m {
            for jj in j..m {
                let w = if jj == j { d_psi2[(j, j)] } else { d_psi2[(j, jj)] + d_psi2[(jj, j)] };
                if w == 0.0 {
                    continue;
                }
                let mut e = 0.0;
                for d in 0..q {
                    let delta = xu[(j, d)] - xu[(jj, d)];
                    let diff = qx.means[(i, d)] - 0.5 * (xu[(j, d)] + xu[(jj, d)]);
                    e += 0.5 * rho[d] * delta * delta + 2.0 * rho[d] * diff * diff / b[d];
                }
                let g = w * pre * (-e).exp();
                d_gamma += 2.0 * g / gamma;
                for d in 0..q {
                    let s = qx.variances[(i, d)];
                    let delta = xu[(j, d)] - xu[(jj, d)];
                    let diff = qx.means[(i, d)] - 0.5 * (xu[(j, d)] + xu[(jj, d)]);
                    let eb = 2.0 * rho[d] * diff / b[d];
                    d_means[(i, d)] -= g * 2.0 * eb;
                    d_xu[(j, d)] += g * (-rho[d] * delta + eb);
                    d_xu[(jj, d)] += g * (rho[d] * delta + eb);
                    d_variances[(i, d)] +=
                        g * (-2.0 * rho[d] / b[d] + 8.0 * rho[d] * rho[d] * diff * diff / (b[d] * b[d]));
                    d_rho[ri(d)] += g * (-2.0 * s / b[d] - 0.5 * delta * delta - 2.0 * diff * diff / (b[d] * b[d]));
                }
            }
        }
    }
    PsiGrads { d_means, d_variances, d_xu, d_gamma, d_rho }
}

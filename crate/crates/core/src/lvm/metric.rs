//! Posterior of the mapping's Jacobian and the expected metric it induces.
//!
//! Both model kinds reduce to the same predictor: a support set `X̃` (the
//! latents or the inducing inputs), weights `B` with `E[φ(x)] = k(x)ᵀB`, and
//! a symmetric `Λ` with `Var φ(x) = γ - k(x)ᵀΛk(x)`.

use nalgebra::{DMatrix, SymmetricEigen};

use super::*;
use crate::kernels::kernel_matrix;
use crate::linalg::{cholesky_jittered, row_vec, sq_dist, symmetrize, JitterPolicy};
use crate::optim::{minimize, OptimizerSpec};

/// `p(J) = ∏_j N(μ_J^j, Σ_J)`: column `j` of `mean` is `μ_J^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPosterior {
    /// `q×p`, i.e. `E[Jᵀ]`.
    pub mean: DMatrix<f64>,
    /// `q×q`, shared by every output dimension.
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEval {
    /// Expected metric, symmetric positive definite.
    pub g: DMatrix<f64>,
    /// `dg[l] = ∂G/∂x^l`.
    pub dg: Vec<DMatrix<f64>>,
    /// Magnification factor `√det G`.
    pub mf: f64,
    pub var_map: f64,
    /// Diagonal jitter that was added to `g` (zero when not needed).
    pub jitter: f64,
}

/// Smallest eigenvalue the returned metric is allowed to have.
pub const METRIC_MIN_EIGENVALUE: f64 = 1e-10;

/// `E[J]ᵀE[J] + pΣ_J` in the `q×q` convention of [`JacobianPosterior`].
pub fn expected_metric(jp: &JacobianPosterior) -> DMatrix<f64> {
    let p = jp.mean.ncols() as f64;
    symmetrize(&(&jp.mean * jp.mean.transpose() + &jp.cov * p))
}

#[derive(Debug, Clone)]
pub struct MetricField {
    pub kind: ModelKind,
    pub kernel: RbfParams,
    rho: Vec<f64>,
    support: Vec<Vec<f64>>,
    /// `m×p` weights `B`.
    weights: DMatrix<f64>,
    /// `m×m` symmetric `Λ`.
    lambda: DMatrix<f64>,
    data_mean: Vec<f64>,
    /// Training latent means, `N×q`.
    pub latents: DMatrix<f64>,
    /// Training data rows, used to seed [`MetricField::locate`].
    data: DMatrix<f64>,
}

struct Local {
    k: Vec<f64>,
    /// `d[i*q + l] = support_il - x_l`
    d: Vec<f64>,
    /// `D[i*q + l] = ∂k_i/∂x^l`
    dk: DMatrix<f64>,
}

impl MetricField {
    pub fn new(model: &LatentModel) -> Result<Self> {
        let q = model.latent_dim();
        let y = model.centered_data();
        let (support_m, weights, lambda) = match model.kind {
            ModelKind::Gplvm => {
                let x = &model.latent.means;
                let mut kn = kernel_matrix(&model.kernel, x, x)?;
                for i in 0..x.nrows() {
                    kn[(i, i)] += model.noise_var;
                }
                let chol = cholesky_jittered(&kn, JitterPolicy::ALWAYS)?;
                (x.clone(), chol.solve(&y), symmetrize(&chol.inverse()))
            }
            ModelKind::Bgplvm => {
                let (xu, mu, sigma) = match (&model.inducing, &model.qu_mean, &model.qu_cov) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(Error::param("Bayesian GPLVM without inducing posterior")),
                };
                let kuu = kernel_matrix(&model.kernel, xu, xu)?;
                let chol = cholesky_jittered(&kuu, JitterPolicy::ALWAYS)?;
                let kinv = chol.inverse();
                let lam = &kinv - &kinv * sigma * &kinv;
                (xu.clone(), chol.solve(mu), symmetrize(&lam))
            }
        };
        if weights.ncols() != model.ambient_dim() {
            return Err(Error::shape("inducing posterior mean has wrong number of columns"));
        }
        let support = (0..support_m.nrows()).map(|i| row_vec(&support_m, i)).collect();
        Ok(MetricField {
            kind: model.kind,
            kernel: model.kernel.clone(),
            rho: model.kernel.rho_vec(q),
            support,
            weights,
            lambda,
            data_mean: model.data_mean.clone(),
            latents: model.latent.means.clone(),
            data: model.data.clone(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.rho.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.latent_dim() {
            return Err(Error::shape(format!("latent point of dimension {} for a {}-d chart", x.len(), self.latent_dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite latent point"));
        }
        Ok(())
    }

    fn local(&self, x: &[f64]) -> Local {
        let q = x.len();
        let m = self.support.len();
        let mut k = vec![0.0; m];
        let mut d = vec![0.0; m * q];
        let mut dk = DMatrix::zeros(m, q);
        for (i, z) in self.support.iter().enumerate() {
            let mut e = 0.0;
            for l in 0..q {
                let diff = z[l] - x[l];
                d[i * q + l] = diff;
                e += self.rho[l] * diff * diff;
            }
            let ki = self.kernel.gamma * (-e).exp();
            k[i] = ki;
            for l in 0..q {
                dk[(i, l)] = 2.0 * self.rho[l] * d[i * q + l] * ki;
            }
        }
        Local { k, d, dk }
    }

    fn var_from(&self, k: &[f64]) -> f64 {
        let m = k.len();
        let mut s = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                row += self.lambda[(i, j)] * k[j];
            }
            s += k[i] * row;
        }
        self.kernel.gamma - s
    }

    /// Posterior mean of the mapping, in data coordinates.
    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let loc = self.local(x);
        Ok((0..self.ambient_dim())
            .map(|j| self.data_mean[j] + loc.k.iter().enumerate().map(|(i, ki)| ki * self.weights[(i, j)]).sum::<f64>())
            .collect())
    }

    /// `Var(φ(x) | x)` for one output dimension.
    pub fn var_map(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.var_from(&self.local(x).k))
    }

    pub fn jacobian_posterior(&self, x: &[f64]) -> Result<JacobianPosterior> {
        self.check(x)?;
        let loc = self.local(x);
        let mean = loc.dk.transpose() * &self.weights;
        let ld = &self.lambda * &loc.dk;
        let c = crate::kernels::kernel_hess_at_star(&self.kernel, x.len());
        let cov = symmetrize(&(c - loc.dk.transpose() * ld));
        Ok(JacobianPosterior { mean, cov })
    }

    /// Expected metric, its coordinate gradient, magnification factor and
    /// mapping variance at `x`.
    pub fn metric_eval(&self, x: &[f64]) -> Result<MetricEval> {
        self.check(x)?;
        let q = x.len();
        let p = self.ambient_dim() as f64;
        let loc = self.local(x);
        let mu = loc.dk.transpose() * &self.weights;
        let ld = &self.lambda * &loc.dk;
        let c = crate::kernels::kernel_hess_at_star(&self.kernel, q);
        let sigma = c - loc.dk.transpose() * &ld;
        let g_raw = &mu * mu.transpose() + sigma * p;
        let mut g = symmetrize(&g_raw);

        let m = self.support.len();
        let mut dg = Vec::with_capacity(q);
        let mut h = DMatrix::zeros(m, q);
        for r in 0..q {
            for i in 0..m {
                let ki = loc.k[i];
                let dr = loc.d[i * q + r];
                for l in 0..q {
                    let dl = loc.d[i * q + l];
                    let mut v = 4.0 * self.rho[l] * self.rho[r] * dl * dr * ki;
                    if l == r {
                        v -= 2.0 * self.rho[l] * ki;
                    }
                    h[(i, l)] = v;
                }
            }
            let dmu = h.transpose() * &self.weights;
            let hld = h.transpose() * &ld;
            let dsigma = -(&hld + hld.transpose());
            let t = &dmu * mu.transpose();
            dg.push(symmetrize(&(&t + t.transpose() + dsigma * p)));
        }

        let lmin = min_eig(&g);
        let mut jitter = 0.0;
        if lmin < METRIC_MIN_EIGENVALUE {
            jitter = 2.0 * METRIC_MIN_EIGENVALUE - lmin;
            for i in 0..q {
                g[(i, i)] += jitter;
            }
        }
        let det = g.determinant();
        let mf = det.max(0.0).sqrt();
        Ok(MetricEval { g, dg, mf, var_map: self.var_from(&loc.k), jitter })
    }

    /// Latent point whose posterior mean is closest to `s` in data space,
    /// started from the latent of the nearest training point unless `start`
    /// is given.
    pub fn locate(&self, s: &[f64], start: Option<&[f64]>) -> Result<Vec<f64>> {
        if s.len() != self.ambient_dim() {
            return Err(Error::shape(format!("target of dimension {} for {}-d data", s.len(), self.ambient_dim())));
        }
        let x0 = match start {
            Some(x) => {
                self.check(x)?;
                x.to_vec()
            }
            None => {
                let mut best = (f64::INFINITY, 0);
                for i in 0..self.data.nrows() {
                    let d = sq_dist(&row_vec(&self.data, i), s);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                row_vec(&self.latents, best.1)
            }
        };
        let p = self.ambient_dim();
        let spec = OptimizerSpec { grad_tol: 1e-10, ..OptimizerSpec::default() }.with_max_iters(500);
        let res = minimize(
            |x| {
                let loc = self.local(x);
                let mut r = vec![0.0; p];
                for (j, rj) in r.iter_mut().enumerate() {
                    *rj = self.data_mean[j] - s[j]
                        + loc.k.iter().enumerate().map(|(i, ki)| ki * self.weights[(i, j)]).sum::<f64>();
                }
                let mu = loc.dk.transpose() * &self.weights;
                let grad = (0..x.len()).map(|l| (0..p).map(|j| mu[(l, j)] * r[j]).sum()).collect();
                (0.5 * r.iter().map(|v| v * v).sum::<f64>(), grad)
            },
            &x0,
            &spec,
        );
        Ok(res.x)
    }
}

fn min_eig(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 1 {
        return g[(0, 0)];
    }
    if g.nrows() == 2 {
        let (a, b, c) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
        let h = 0.5 * (a + c);
        let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return h - r;
    }
    SymmetricEigen::new(g.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

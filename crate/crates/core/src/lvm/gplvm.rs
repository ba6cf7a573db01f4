//! MAP-trained GPLVM: `Σ_j log N(s_j | 0, K_XX + σ²I) + log N(X | 0, I)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::init::{initial_latents, InitSpec};
use super::*;
use crate::kernels::{kernel_matrix, kernel_matrix_backward};
use crate::linalg::{cholesky_jittered, median, nearest_neighbor_distances, JitterPolicy};
use crate::optim::{minimize, OptimizerSpec};

/// Hyperparameters packed as `[log γ, log ρ.., log(σ² - floor)]`.
pub(crate) fn pack_hyp(kernel: &RbfParams, noise_var: f64, floor: f64) -> Vec<f64> {
    let mut v = vec![kernel.gamma.ln()];
    v.extend(kernel.rho.iter().map(|r| r.ln()));
    v.push((noise_var - floor).max(1e-300).ln());
    v
}

pub(crate) fn unpack_hyp(h: &[f64], ard: bool, floor: f64) -> (RbfParams, f64) {
    let nr = h.len() - 2;
    let kernel = RbfParams { gamma: h[0].exp(), rho: h[1..1 + nr].iter().map(|v| v.exp()).collect(), ard };
    (kernel, floor + h[nr + 1].exp())
}

/// Chain-rule factors for [`pack_hyp`] applied to `(∂γ, ∂ρ, ∂σ²)`.
pub(crate) fn hyp_grad(kernel: &RbfParams, noise_var: f64, floor: f64, dg: f64, dr: &[f64], dn: f64) -> Vec<f64> {
    let mut v = vec![dg * kernel.gamma];
    v.extend(kernel.rho.iter().zip(dr).map(|(r, d)| r * d));
    v.push(dn * (noise_var - floor));
    v
}

/// Default hyperparameter starting point for centered data and initial latents.
pub(crate) fn initial_hyp(y: &DMatrix<f64>, x: &DMatrix<f64>, init: &InitSpec) -> (RbfParams, f64) {
    let n = y.nrows() as f64;
    let var = y.iter().map(|v| v * v).sum::<f64>() / (n * y.ncols() as f64);
    let ell = init
        .lengthscale
        .unwrap_or_else(|| (4.0 * median(&nearest_neighbor_distances(x))).clamp(1e-3, 1.0));
    let rho = 1.0 / (2.0 * ell * ell);
    let q = x.ncols();
    let kernel = RbfParams {
        gamma: var.max(1e-12),
        rho: if init.ard { vec![rho; q] } else { vec![rho] },
        ard: init.ard,
    };
    let noise = init.noise_var.unwrap_or(0.01 * var).max(1e-12);
    (kernel, noise)
}

fn log_lik_with(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    kernel: &RbfParams,
    noise_var: f64,
    policy: JitterPolicy,
) -> Result<f64> {
    let n = x.nrows();
    let p = y.ncols() as f64;
    let mut kn = kernel_matrix(kernel, x, x)?;
    for i in 0..n {
        kn[(i, i)] += noise_var;
    }
    let chol = cholesky_jittered(&kn, policy)?;
    let alpha = chol.solve(y);
    let quad = y.component_mul(&alpha).sum();
    Ok(-0.5 * quad - 0.5 * p * chol.ln_det() - 0.5 * n as f64 * p * (2.0 * PI).ln())
}

/// `Σ_j log N(s_j | 0, K_XX + σ²I)` for centered data `y` at fixed latents,
/// factorized without jitter unless the matrix is numerically singular.
pub fn exact_log_likelihood(y: &DMatrix<f64>, x: &DMatrix<f64>, kernel: &RbfParams, noise_var: f64) -> Result<f64> {
    if y.nrows() != x.nrows() {
        return Err(Error::shape(format!("{} data rows vs {} latents", y.nrows(), x.nrows())));
    }
    log_lik_with(y, x, kernel, noise_var, JitterPolicy::ON_FAILURE)
}

fn log_prior(x: &DMatrix<f64>) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

/// GPLVM training objective (log likelihood plus standard-normal log prior).
pub fn gplvm_objective(y: &DMatrix<f64>, x: &DMatrix<f64>, kernel: &RbfParams, noise_var: f64) -> Result<f64> {
    if y.nrows() != x.nrows() {
        return Err(Error::shape(format!("{} data rows vs {} latents", y.nrows(), x.nrows())));
    }
    Ok(log_lik_with(y, x, kernel, noise_var, JitterPolicy::ALWAYS)? + log_prior(x))
}

#[derive(Debug, Clone)]
pub struct GplvmGrad {
    pub d_x: DMatrix<f64>,
    pub d_gamma: f64,
    pub d_rho: Vec<f64>,
    pub d_noise: f64,
}

pub fn gplvm_objective_and_grad(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    kernel: &RbfParams,
    noise_var: f64,
) -> Result<(f64, GplvmGrad)> {
    if y.nrows() != x.nrows() {
        return Err(Error::shape(format!("{} data rows vs {} latents", y.nrows(), x.nrows())));
    }
    let n = x.nrows();
    let p = y.ncols() as f64;
    let k = kernel_matrix(kernel, x, x)?;
    let mut kn = k.clone();
    for i in 0..n {
        kn[(i, i)] += noise_var;
    }
    let chol = cholesky_jittered(&kn, JitterPolicy::ALWAYS)?;
    let alpha = chol.solve(y);
    let kinv = chol.inverse();
    let quad = y.component_mul(&alpha).sum();
    let value =
        -0.5 * quad - 0.5 * p * chol.ln_det() - 0.5 * n as f64 * p * (2.0 * PI).ln() + log_prior(x);

    let w = (&alpha * alpha.transpose() - kinv * p) * 0.5;
    let kg = kernel_matrix_backward(kernel, x, x, &k, &w);
    let d_x = kg.d_a + kg.d_b - x;
    Ok((value, GplvmGrad { d_x, d_gamma: kg.d_gamma, d_rho: kg.d_rho, d_noise: w.trace() }))
}

/// Fit latents and hyperparameters of a GPLVM to the point cloud `s` (N×p).
pub fn train_gplvm(s: &DMatrix<f64>, q: usize, init: &InitSpec, opt: &OptimizerSpec) -> Result<LatentModel> {
    check_training_inputs(s, q)?;
    let mean = column_means(s);
    let y = centered(s, &mean);
    let floor = noise_floor(&y);
    let x0 = initial_latents(&y, q, init.method)?;
    let (k0, n0) = initial_hyp(&y, &x0, init);
    let n = y.nrows();
    let ard = k0.ard;

    let mut theta: Vec<f64> = x0.transpose().iter().cloned().collect();
    theta.extend(pack_hyp(&k0, n0.max(2.0 * floor), floor));
    let nx = n * q;
    let unpack = |t: &[f64]| {
        let x = DMatrix::from_row_slice(n, q, &t[..nx]);
        let (kern, noise) = unpack_hyp(&t[nx..], ard, floor);
        (x, kern, noise)
    };

    let res = minimize(
        |t| {
            let (x, kern, noise) = unpack(t);
            match gplvm_objective_and_grad(&y, &x, &kern, noise) {
                Ok((v, g)) => {
                    let mut grad: Vec<f64> = g.d_x.transpose().iter().map(|v| -v).collect();
                    grad.extend(hyp_grad(&kern, noise, floor, g.d_gamma, &g.d_rho, g.d_noise).iter().map(|v| -v));
                    (-v, grad)
                }
                Err(_) => (f64::NAN, vec![0.0; t.len()]),
            }
        },
        &theta,
        opt,
    );
    if !res.value.is_finite() {
        return Err(Error::linalg("GPLVM objective is not finite at the initial point"));
    }
    let (x, kernel, noise_var) = unpack(&res.x);
    log::info!(
        "gplvm: objective {:.6} after {} iterations ({:?})",
        -res.value,
        res.iterations,
        res.termination
    );
    Ok(LatentModel {
        kind: ModelKind::Gplvm,
        latent: VariationalGaussian::point_masses(x),
        inducing: None,
        qu_mean: None,
        qu_cov: None,
        kernel,
        noise_var,
        data_hash: data_hash(s),
        data: s.clone(),
        data_mean: mean,
        report: TrainingReport::from_optim(&res),
    })
}

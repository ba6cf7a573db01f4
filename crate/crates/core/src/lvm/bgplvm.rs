//! Variational Bayesian GPLVM with inducing inputs and the collapsed bound.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gplvm::{hyp_grad, initial_hyp, pack_hyp, unpack_hyp};
use super::init::{initial_latents, InitSpec};
use super::*;
use crate::kernels::{kernel_matrix, kernel_matrix_backward, psi_statistics, psi_statistics_backward, PsiStats};
use crate::linalg::{cholesky_jittered, median, nearest_neighbor_distances, JitterPolicy};
use crate::optim::{minimize, OptimizerSpec};

/// `KL(q(X) ‖ N(0, I))` for a diagonal Gaussian.
pub fn kl_to_standard_normal(qx: &VariationalGaussian) -> f64 {
    qx.means
        .iter()
        .zip(qx.variances.iter())
        .map(|(m, s)| 0.5 * (s + m * m - s.ln() - 1.0))
        .sum()
}

/// The two parts of the evidence lower bound `data_term - kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub data_term: f64,
    pub kl: f64,
}

impl BoundTerms {
    pub fn bound(&self) -> f64 {
        self.data_term - self.kl
    }
}

#[derive(Debug, Clone)]
pub struct BgplvmGrad {
    pub d_means: DMatrix<f64>,
    pub d_variances: DMatrix<f64>,
    pub d_xu: DMatrix<f64>,
    pub d_gamma: f64,
    pub d_rho: Vec<f64>,
    pub d_noise: f64,
}

struct Pieces {
    psi: PsiStats,
    kuu: DMatrix<f64>,
    kuu_inv: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    a_inv_c: DMatrix<f64>,
    data_term: f64,
    beta: f64,
    tr_yy: f64,
    t: f64,
}

fn check_shapes(y: &DMatrix<f64>, qx: &VariationalGaussian, xu: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != qx.len() {
        return Err(Error::shape(format!("{} data rows vs {} latents", y.nrows(), qx.len())));
    }
    if xu.ncols() != qx.dim() {
        return Err(Error::shape(format!("inducing dimension {} vs latent dimension {}", xu.ncols(), qx.dim())));
    }
    if xu.nrows() == 0 || xu.nrows() > qx.len() {
        return Err(Error::param(format!("need 1 <= m <= N inducing inputs, got m={} for N={}", xu.nrows(), qx.len())));
    }
    Ok(())
}

fn pieces(y: &DMatrix<f64>, qx: &VariationalGaussian, xu: &DMatrix<f64>, kernel: &RbfParams, noise_var: f64) -> Result<Pieces> {
    check_shapes(y, qx, xu)?;
    if !(noise_var > 0.0) {
        return Err(Error::param(format!("noise variance must be positive, got {noise_var}")));
    }
    let n = y.nrows() as f64;
    let p = y.ncols() as f64;
    let beta = 1.0 / noise_var;
    let psi = psi_statistics(kernel, qx, xu)?;
    let kuu = kernel_matrix(kernel, xu, xu)?;
    let ck = cholesky_jittered(&kuu, JitterPolicy::ALWAYS)?;
    let kuu_inv = ck.inverse();
    let a = &kuu + &psi.psi2 * beta;
    // A = K_uu + βψ2 inherits definiteness from the jittered K_uu
    let ca = cholesky_jittered(&a, JitterPolicy::ON_FAILURE)?;
    let a_inv = ca.inverse();
    let c = psi.psi1.transpose() * y;
    let a_inv_c = ca.solve(&c);
    let tr_yy = y.iter().map(|v| v * v).sum::<f64>();
    let t = c.component_mul(&a_inv_c).sum();
    let tr_kpsi = kuu_inv.component_mul(&psi.psi2).sum();
    let data_term = -0.5 * n * p * (2.0 * PI).ln() + 0.5 * n * p * beta.ln() - 0.5 * beta * tr_yy
        - 0.5 * p * beta * psi.psi0
        + 0.5 * p * beta * tr_kpsi
        + 0.5 * p * ck.ln_det()
        - 0.5 * p * ca.ln_det()
        + 0.5 * beta * beta * t;
    Ok(Pieces { psi, kuu, kuu_inv, a_inv, a_inv_c, data_term, beta, tr_yy, t })
}

/// Evidence lower bound for centered data `y` (N×p).
pub fn bgplvm_bound(
    y: &DMatrix<f64>,
    qx: &VariationalGaussian,
    xu: &DMatrix<f64>,
    kernel: &RbfParams,
    noise_var: f64,
) -> Result<BoundTerms> {
    let pc = pieces(y, qx, xu, kernel, noise_var)?;
    Ok(BoundTerms { data_term: pc.data_term, kl: kl_to_standard_normal(qx) })
}

/// Bound and its gradient with respect to the variational parameters,
/// inducing inputs, kernel hyperparameters and noise variance.
pub fn bgplvm_bound_and_grad(
    y: &DMatrix<f64>,
    qx: &VariationalGaussian,
    xu: &DMatrix<f64>,
    kernel: &RbfParams,
    noise_var: f64,
) -> Result<(BoundTerms, BgplvmGrad)> {
    let pc = pieces(y, qx, xu, kernel, noise_var)?;
    let p = y.ncols() as f64;
    let n = y.nrows() as f64;
    let beta = pc.beta;

    let d_psi0 = -0.5 * p * beta;
    let d_psi1 = y * pc.a_inv_c.transpose() * (beta * beta);
    let d_a = &pc.a_inv * (-0.5 * p) - (&pc.a_inv_c * pc.a_inv_c.transpose()) * (0.5 * beta * beta);
    let d_a = crate::linalg::symmetrize(&d_a);
    let d_psi2 = &d_a * beta + &pc.kuu_inv * (0.5 * p * beta);
    let d_kuu = &d_a + &pc.kuu_inv * (0.5 * p) - (&pc.kuu_inv * &pc.psi.psi2 * &pc.kuu_inv) * (0.5 * p * beta);
    let tr_kpsi = pc.kuu_inv.component_mul(&pc.psi.psi2).sum();
    let d_beta = 0.5 * n * p / beta - 0.5 * pc.tr_yy - 0.5 * p * pc.psi.psi0 + 0.5 * p * tr_kpsi + beta * pc.t
        + d_a.component_mul(&pc.psi.psi2).sum();

    let pg = psi_statistics_backward(kernel, qx, xu, &pc.psi, d_psi0, &d_psi1, &d_psi2);
    let kg = kernel_matrix_backward(kernel, xu, xu, &pc.kuu, &d_kuu);

    let d_means = pg.d_means - &qx.means;
    let d_variances = DMatrix::from_fn(qx.len(), qx.dim(), |i, d| {
        pg.d_variances[(i, d)] - 0.5 * (1.0 - 1.0 / qx.variances[(i, d)])
    });
    let d_rho = pg.d_rho.iter().zip(&kg.d_rho).map(|(a, b)| a + b).collect();
    let grad = BgplvmGrad {
        d_means,
        d_variances,
        d_xu: pg.d_xu + kg.d_a + kg.d_b,
        d_gamma: pg.d_gamma + kg.d_gamma,
        d_rho,
        d_noise: -d_beta * beta * beta,
    };
    Ok((BoundTerms { data_term: pc.data_term, kl: kl_to_standard_normal(qx) }, grad))
}

/// Optimal Gaussian `q(u)` given everything else: mean `βK_uu A⁻¹ ψ1ᵀY`
/// (m×p) and covariance `K_uu A⁻¹ K_uu` with `A = K_uu + βψ2`.
pub fn optimal_qu(
    y: &DMatrix<f64>,
    qx: &VariationalGaussian,
    xu: &DMatrix<f64>,
    kernel: &RbfParams,
    noise_var: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pc = pieces(y, qx, xu, kernel, noise_var)?;
    let mean = &pc.kuu * &pc.a_inv_c * pc.beta;
    let cov = crate::linalg::symmetrize(&(&pc.kuu * &pc.a_inv * &pc.kuu));
    Ok((mean, cov))
}

struct Layout {
    n: usize,
    q: usize,
    m: usize,
    ard: bool,
    floor: f64,
}

impl Layout {
    fn unpack(&self, t: &[f64]) -> (VariationalGaussian, DMatrix<f64>, RbfParams, f64) {
        let nq = self.n * self.q;
        let means = DMatrix::from_row_slice(self.n, self.q, &t[..nq]);
        let variances = DMatrix::from_row_slice(self.n, self.q, &t[nq..2 * nq]).map(|v| v.exp());
        let mq = self.m * self.q;
        let xu = DMatrix::from_row_slice(self.m, self.q, &t[2 * nq..2 * nq + mq]);
        let (kernel, noise) = unpack_hyp(&t[2 * nq + mq..], self.ard, self.floor);
        (VariationalGaussian { means, variances }, xu, kernel, noise)
    }
}

/// Fit a Bayesian GPLVM with `m` inducing inputs to the point cloud `s`.
pub fn train_bgplvm(s: &DMatrix<f64>, q: usize, m: usize, init: &InitSpec, opt: &OptimizerSpec) -> Result<LatentModel> {
    check_training_inputs(s, q)?;
    let n = s.nrows();
    if m == 0 || m > n {
        return Err(Error::param(format!("need 1 <= m <= N inducing inputs, got m={m} for N={n}")));
    }
    let mean = column_means(s);
    let y = centered(s, &mean);
    let floor = noise_floor(&y);
    let x0 = initial_latents(&y, q, init.method)?;
    let (k0, n0) = initial_hyp(&y, &x0, init);
    let s0 = init.variance.unwrap_or_else(|| {
        let d = median(&nearest_neighbor_distances(&x0));
        (0.5 * d).powi(2).max(1e-8)
    });
    if !(s0 > 0.0) {
        return Err(Error::param(format!("initial latent variance must be positive, got {s0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let xu0 = DMatrix::from_fn(m, q, |j, d| x0[(idx[j], d)]);

    let layout = Layout { n, q, m, ard: k0.ard, floor };
    let mut theta: Vec<f64> = x0.transpose().iter().cloned().collect();
    theta.extend(std::iter::repeat(s0.ln()).take(n * q));
    theta.extend(xu0.transpose().iter().cloned());
    theta.extend(pack_hyp(&k0, n0.max(2.0 * floor), floor));

    let res = minimize(
        |t| {
            let (qx, xu, kern, noise) = layout.unpack(t);
            match bgplvm_bound_and_grad(&y, &qx, &xu, &kern, noise) {
                Ok((b, g)) => {
                    let mut grad: Vec<f64> = g.d_means.transpose().iter().map(|v| -v).collect();
                    let dls = g.d_variances.component_mul(&qx.variances);
                    grad.extend(dls.transpose().iter().map(|v| -v));
                    grad.extend(g.d_xu.transpose().iter().map(|v| -v));
                    grad.extend(hyp_grad(&kern, noise, floor, g.d_gamma, &g.d_rho, g.d_noise).iter().map(|v| -v));
                    (-b.bound(), grad)
                }
                Err(_) => (f64::NAN, vec![0.0; t.len()]),
            }
        },
        &theta,
        opt,
    );
    if !res.value.is_finite() {
        return Err(Error::linalg("variational bound is not finite at the initial point"));
    }
    let (qx, xu, kernel, noise_var) = layout.unpack(&res.x);
    let (qu_mean, qu_cov) = optimal_qu(&y, &qx, &xu, &kernel, noise_var)?;
    log::info!(
        "bgplvm: bound {:.6} after {} iterations ({:?})",
        -res.value,
        res.iterations,
        res.termination
    );
    Ok(LatentModel {
        kind: ModelKind::Bgplvm,
        latent: qx,
        inducing: Some(xu),
        qu_mean: Some(qu_mean),
        qu_cov: Some(qu_cov),
        kernel,
        noise_var,
        data_hash: data_hash(s),
        data: s.clone(),
        data_mean: mean,
        report: TrainingReport::from_optim(&res),
    })
}

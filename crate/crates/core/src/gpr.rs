//! Exact Gaussian-process regression with either a heat-kernel stack or an
//! RBF kernel as covariance, and marginal-likelihood hyperparameter fits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::heat::HeatKernelStack;
use crate::kernels::{kernel_matrix, kernel_matrix_backward, RbfParams};
use crate::linalg::{self, cholesky_jittered, JitterPolicy, JitteredChol};
use crate::optim::{minimize, OptimizerSpec};

fn check_cov(cov: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if cov.nrows() != cov.ncols() || cov.nrows() != y.len() {
        return Err(Error::shape(format!("covariance {:?} for {} responses", cov.shape(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::param("need at least one observation"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite response"));
    }
    Ok(())
}

fn with_noise(cov: &DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    let mut c = linalg::symmetrize(cov);
    for i in 0..c.nrows() {
        c[(i, i)] += noise;
    }
    c
}

fn lml_from(chol: &JitteredChol, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve_vec(y);
    let n = y.len() as f64;
    (-0.5 * y.dot(&alpha) - 0.5 * chol.ln_det() - 0.5 * n * (2.0 * PI).ln(), alpha)
}

/// `log N(y | 0, cov + σ²_noise I)` through a Cholesky factor.
pub fn log_marginal(cov: &DMatrix<f64>, y: &[f64], noise_var: f64) -> Result<f64> {
    check_cov(cov, y)?;
    if !(noise_var >= 0.0) {
        return Err(Error::param(format!("noise variance must be non-negative, got {noise_var}")));
    }
    let chol = cholesky_jittered(&with_noise(cov, noise_var), JitterPolicy::ON_FAILURE)?;
    Ok(lml_from(&chol, &DVector::from_column_slice(y)).0)
}

/// Which covariance a fit uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSource {
    /// `σ_h² K̂^t` from a heat-kernel stack.
    HeatStack { t_index: usize, time: f64, sigma_h2: f64 },
    /// RBF kernel on explicit inputs.
    EuclideanRbf { params: RbfParams },
    /// A fixed covariance supplied by the caller, scaled by `scale`.
    Fixed { scale: f64 },
}

/// A conditioned GP: factor of the training covariance plus noise, and the
/// weights `(Σ_ff + σ²I)⁻¹ y`.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub source: KernelSource,
    pub noise_var: f64,
    pub log_marginal: f64,
    pub alpha: DVector<f64>,
    pub chol: JitteredChol,
    /// Identifiers of the training points (caller-defined indices).
    pub train: Vec<usize>,
    /// Training inputs for RBF fits.
    pub inputs: Option<DMatrix<f64>>,
    /// Training covariance without noise (after any repair and scaling).
    pub train_cov: DMatrix<f64>,
}

impl GpFit {
    /// Condition on `y` with covariance `cov` and noise `noise_var`.
    pub fn condition(cov: &DMatrix<f64>, y: &[f64], noise_var: f64, source: KernelSource, train: Vec<usize>) -> Result<Self> {
        check_cov(cov, y)?;
        let chol = cholesky_jittered(&with_noise(cov, noise_var), JitterPolicy::ON_FAILURE)?;
        let (lml, alpha) = lml_from(&chol, &DVector::from_column_slice(y));
        Ok(GpFit {
            source,
            noise_var,
            log_marginal: lml,
            alpha,
            chol,
            train,
            inputs: None,
            train_cov: linalg::symmetrize(cov),
        })
    }

    pub fn n_train(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Variances that came out slightly negative and were clamped to zero.
    pub clamped: usize,
}

/// Posterior mean `Σ_*f α` and variance `prior − Σ_*f (Σ_ff+σ²I)⁻¹ Σ_f*`.
pub fn predict(fit: &GpFit, cross_cov: &DMatrix<f64>, prior_var: &[f64]) -> Result<Prediction> {
    let n = fit.n_train();
    if cross_cov.ncols() != n || cross_cov.nrows() != prior_var.len() {
        return Err(Error::shape(format!(
            "cross covariance {:?} and {} prior variances for {n} training points",
            cross_cov.shape(),
            prior_var.len()
        )));
    }
    let mean: Vec<f64> = (cross_cov * &fit.alpha).iter().cloned().collect();
    let l = fit.chol.chol.l_dirty();
    let mut v = cross_cov.transpose();
    l.solve_lower_triangular_mut(&mut v);
    let mut clamped = 0;
    let mut worst = 0.0f64;
    let var = prior_var
        .iter()
        .enumerate()
        .map(|(i, pv)| {
            let s = pv - v.column(i).norm_squared();
            if s < 0.0 {
                worst = worst.min(s);
                clamped += 1;
                0.0
            } else {
                s
            }
        })
        .collect();
    if worst < -1e-8 {
        log::warn!("{clamped} negative posterior variances clamped to zero (most negative {worst:e})");
    }
    Ok(Prediction { mean, var, clamped })
}

/// Likelihood of one heat slice over `(log σ_h², log(σ² − floor))`.
fn slice_objective(k: &DMatrix<f64>, y: &DVector<f64>, nf: f64, t: &[f64]) -> (f64, Vec<f64>) {
    let (s, noise) = (t[0].exp(), nf + t[1].exp());
    let c = k * s + DMatrix::identity(k.nrows(), k.nrows()) * noise;
    let Ok(chol) = cholesky_jittered(&c, JitterPolicy::ON_FAILURE) else {
        return (f64::NAN, vec![0.0; 2]);
    };
    let (lml, alpha) = lml_from(&chol, y);
    let w = (&alpha * alpha.transpose() - chol.inverse()) * 0.5;
    let ds = w.component_mul(k).sum() * s;
    let dn = w.trace() * (noise - nf);
    (-lml, vec![-ds, -dn])
}

/// Per-slice outcome of the heat-GP grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    pub t_index: usize,
    pub time: f64,
    pub log_marginal: Option<f64>,
    pub sigma_h2: f64,
    pub noise_var: f64,
    /// Negative eigenvalues of the symmetrized slice were clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatFitSummary {
    pub selected_t_index: usize,
    pub selected_t: f64,
    pub sigma_h2: f64,
    pub noise_var: f64,
    pub log_marginal: f64,
    pub curve: Vec<SliceFit>,
    pub jitter: f64,
    pub tie_break: String,
}

/// Options for [`fit_heat_gp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatGpSpec {
    pub optimizer: OptimizerSpec,
    /// Lower bound on `σ²_noise / mean(y²)`. Monte Carlo error in the cross
    /// covariances is amplified by `(K + σ²I)⁻¹y`; near-interpolating fits
    /// turn a few percent of kernel noise into order-one prediction error.
    pub min_noise_ratio: f64,
}

impl Default for HeatGpSpec {
    fn default() -> Self {
        HeatGpSpec { optimizer: OptimizerSpec::default(), min_noise_ratio: DEFAULT_MIN_NOISE_RATIO }
    }
}

pub const DEFAULT_MIN_NOISE_RATIO: f64 = 0.1;

/// Relative tolerance under which two slice likelihoods count as tied.
const TIE_TOL: f64 = 1e-9;

/// Symmetrize a Monte Carlo slice, clipping negative eigenvalues when even
/// the largest jitter cannot make it factorizable.
fn repair_slice(k: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = linalg::symmetrize(k);
    if cholesky_jittered(&s, JitterPolicy::ON_FAILURE).is_ok() {
        (s, false)
    } else {
        (linalg::clip_psd(&s), true)
    }
}

/// Grid search over the stack's time slices with a continuous fit of
/// `(σ_h², σ²_noise)` on each; `rows` index [`HeatKernelStack::starts`].
pub fn fit_heat_gp(stack: &HeatKernelStack, rows: &[usize], y: &[f64], spec: &HeatGpSpec) -> Result<(GpFit, HeatFitSummary)> {
    if !(spec.min_noise_ratio >= 0.0) {
        return Err(Error::param(format!("min_noise_ratio must be non-negative, got {}", spec.min_noise_ratio)));
    }
    if rows.len() != y.len() {
        return Err(Error::shape(format!("{} labeled rows for {} responses", rows.len(), y.len())));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= stack.n_starts()) {
        return Err(Error::param(format!("labeled row {r} outside a stack with {} rows", stack.n_starts())));
    }
    if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("need finite responses"));
    }
    let yv = DVector::from_column_slice(y);
    let var_y = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).max(1e-12);
    let nf = spec.min_noise_ratio * var_y;
    let fits = exec::map_range(stack.sigma.len(), |k| {
        let (kk, clipped) = repair_slice(&stack.start_block(k, rows));
        let md = linalg::mean_diag(&kk);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for noise_frac in [0.1, 0.01] {
            let x0 = [(var_y / md).ln(), (noise_frac * var_y).ln()];
            let res = minimize(|t| slice_objective(&kk, &yv, nf, t), &x0, &spec.optimizer);
            if res.value.is_finite() && best.as_ref().is_none_or(|b| res.value < b.0) {
                best = Some((res.value, res.x));
            }
        }
        let (lml, s, n) = match best {
            Some((v, x)) => (Some(-v), x[0].exp(), nf + x[1].exp()),
            None => (None, f64::NAN, f64::NAN),
        };
        (SliceFit { t_index: k, time: stack.times[k], log_marginal: lml, sigma_h2: s, noise_var: n, clipped }, kk)
    });
    let mut sel: Option<usize> = None;
    for (k, (f, _)) in fits.iter().enumerate() {
        let Some(l) = f.log_marginal else { continue };
        match sel {
            None => sel = Some(k),
            Some(b) => {
                let lb = fits[b].0.log_marginal.unwrap();
                if l > lb + TIE_TOL * lb.abs().max(1.0) {
                    sel = Some(k);
                }
            }
        }
    }
    let k = sel.ok_or_else(|| Error::linalg("no time slice produced a factorizable covariance"))?;
    let (sf, kk) = &fits[k];
    let cov = kk * sf.sigma_h2;
    let source = KernelSource::HeatStack { t_index: k, time: sf.time, sigma_h2: sf.sigma_h2 };
    let fit = GpFit::condition(&cov, y, sf.noise_var, source, rows.to_vec())?;
    let summary = HeatFitSummary {
        selected_t_index: k,
        selected_t: sf.time,
        sigma_h2: sf.sigma_h2,
        noise_var: sf.noise_var,
        log_marginal: fit.log_marginal,
        curve: fits.iter().map(|(f, _)| f.clone()).collect(),
        jitter: fit.chol.jitter,
        tie_break: "smaller t".into(),
    };
    Ok((fit, summary))
}

/// Rebuild the conditioned GP of a previous [`fit_heat_gp`] call from its
/// summary, e.g. after reloading the stack from disk.
pub fn condition_heat(stack: &HeatKernelStack, rows: &[usize], y: &[f64], summary: &HeatFitSummary) -> Result<GpFit> {
    let k = summary.selected_t_index;
    if k >= stack.sigma.len() {
        return Err(Error::param(format!("fit selected slice {k} but the stack has {}", stack.sigma.len())));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= stack.n_starts()) {
        return Err(Error::param(format!("labeled row {r} outside a stack with {} rows", stack.n_starts())));
    }
    let (kk, _) = repair_slice(&stack.start_block(k, rows));
    let source = KernelSource::HeatStack { t_index: k, time: stack.times[k], sigma_h2: summary.sigma_h2 };
    GpFit::condition(&(kk * summary.sigma_h2), y, summary.noise_var, source, rows.to_vec())
}

/// Predict at stack targets from a heat-GP fit. Cross covariances come from
/// the labeled rows; the prior variance at targets that are not starts is
/// approximated by the mean diagonal of the labeled block.
pub fn predict_heat(fit: &GpFit, stack: &HeatKernelStack, targets: &[usize]) -> Result<Prediction> {
    let KernelSource::HeatStack { t_index, sigma_h2, .. } = fit.source else {
        return Err(Error::param("fit does not come from a heat-kernel stack"));
    };
    if let Some(&j) = targets.iter().find(|&&j| j >= stack.n_targets()) {
        return Err(Error::param(format!("target {j} outside the stack")));
    }
    let cross = stack.cross_block(t_index, targets, &fit.train) * sigma_h2;
    let prior = linalg::mean_diag(&fit.train_cov);
    let prior_var: Vec<f64> = targets
        .iter()
        .map(|&j| match stack.starts.iter().position(|&s| s == j) {
            Some(r) => stack.sigma[t_index][(r, j)] * sigma_h2,
            None => prior,
        })
        .collect();
    predict(fit, &cross, &prior_var)
}

/// Euclidean GP likelihood over `[log γ, log ρ.., log σ²]`.
fn rbf_objective(x: &DMatrix<f64>, y: &DVector<f64>, ard: bool, t: &[f64]) -> (f64, Vec<f64>) {
    let nr = t.len() - 2;
    let params = RbfParams { gamma: t[0].exp(), rho: t[1..1 + nr].iter().map(|v| v.exp()).collect(), ard };
    let noise = NOISE_FLOOR + t[nr + 1].exp();
    let Ok(k) = kernel_matrix(&params, x, x) else {
        return (f64::NAN, vec![0.0; t.len()]);
    };
    let Ok(chol) = cholesky_jittered(&with_noise(&k, noise), JitterPolicy::ON_FAILURE) else {
        return (f64::NAN, vec![0.0; t.len()]);
    };
    let (lml, alpha) = lml_from(&chol, y);
    let w = (&alpha * alpha.transpose() - chol.inverse()) * 0.5;
    let g = kernel_matrix_backward(&params, x, x, &k, &w);
    let mut grad = vec![-g.d_gamma * params.gamma];
    grad.extend(g.d_rho.iter().zip(&params.rho).map(|(d, r)| -d * r));
    grad.push(-w.trace() * (noise - NOISE_FLOOR));
    (-lml, grad)
}

const NOISE_FLOOR: f64 = 1e-10;

/// Options for [`fit_euclidean_gp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuclideanGpSpec {
    pub ard: bool,
    pub optimizer: OptimizerSpec,
}

impl Default for EuclideanGpSpec {
    fn default() -> Self {
        EuclideanGpSpec { ard: false, optimizer: OptimizerSpec::default() }
    }
}

/// Maximize the marginal likelihood of an RBF GP on inputs `x` (n×d) over
/// `(γ, ρ, σ²_noise)`, from a fixed set of lengthscale starting points.
pub fn fit_euclidean_gp(x: &DMatrix<f64>, y: &[f64], spec: &EuclideanGpSpec) -> Result<GpFit> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::shape(format!("{} inputs for {} responses", x.nrows(), y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite regression data"));
    }
    let n = x.nrows();
    let d = x.ncols();
    let yv = DVector::from_column_slice(y);
    let var_y = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12);
    let mut dists = Vec::new();
    for i in 0..n {
        for j in 0..i {
            dists.push(linalg::sq_dist(&linalg::row_vec(x, i), &linalg::row_vec(x, j)).sqrt());
        }
    }
    let scale = if dists.is_empty() { 1.0 } else { linalg::median(&dists).max(1e-6) };
    let nr = if spec.ard { d } else { 1 };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for f in [0.1, 0.3, 1.0, 3.0] {
        let ell = f * scale;
        let mut x0 = vec![var_y.ln()];
        x0.extend(std::iter::repeat((1.0 / (2.0 * ell * ell)).ln()).take(nr));
        x0.push((0.1 * var_y).ln());
        let res = minimize(|t| rbf_objective(x, &yv, spec.ard, t), &x0, &spec.optimizer);
        if res.value.is_finite() && best.as_ref().is_none_or(|b| res.value < b.0) {
            best = Some((res.value, res.x));
        }
    }
    let (_, t) = best.ok_or_else(|| Error::linalg("Euclidean GP likelihood not finite at any start"))?;
    let params = RbfParams { gamma: t[0].exp(), rho: t[1..1 + nr].iter().map(|v| v.exp()).collect(), ard: spec.ard };
    let noise = NOISE_FLOOR + t[nr + 1].exp();
    let k = kernel_matrix(&params, x, x)?;
    let mut fit = GpFit::condition(&k, y, noise, KernelSource::EuclideanRbf { params }, (0..n).collect())?;
    fit.inputs = Some(x.clone());
    Ok(fit)
}

/// Predict an RBF fit at new inputs.
pub fn predict_euclidean(fit: &GpFit, x_star: &DMatrix<f64>) -> Result<Prediction> {
    let (KernelSource::EuclideanRbf { params }, Some(x)) = (&fit.source, &fit.inputs) else {
        return Err(Error::param("fit has no RBF kernel and training inputs"));
    };
    let cross = kernel_matrix(params, x_star, x)?;
    predict(fit, &cross, &vec![params.gamma; x_star.nrows()])
}

/// Euclidean-GP likelihood and its gradient in log parameters, exposed for
/// gradient checks.
pub fn euclidean_lml_and_grad(x: &DMatrix<f64>, y: &[f64], params: &RbfParams, noise_var: f64) -> Result<(f64, Vec<f64>)> {
    if noise_var <= NOISE_FLOOR {
        return Err(Error::param("noise variance below the floor"));
    }
    let mut t = vec![params.gamma.ln()];
    t.extend(params.rho.iter().map(|r| r.ln()));
    t.push((noise_var - NOISE_FLOOR).ln());
    let (v, g) = rbf_objective(x, &DVector::from_column_slice(y), params.ard, &t);
    if !v.is_finite() {
        return Err(Error::linalg("covariance not factorizable"));
    }
    Ok((-v, g.into_iter().map(|v| -v).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn naive_lml(c: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let inv = c.clone().try_inverse().unwrap();
        let n = y.len() as f64;
        -0.5 * (y.transpose() * inv * y)[(0, 0)] - 0.5 * c.determinant().ln() - 0.5 * n * (2.0 * PI).ln()
    }

    #[test]
    fn scalar_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!((log_marginal(&one, &[0.0], 0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((log_marginal(&one, &[1.0], 0.0).unwrap() + 0.5 + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=8 {
            let c = random_spd(&mut rng, n);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let yv = DVector::from_column_slice(&y);
            let a = log_marginal(&c, &y, 0.05).unwrap();
            let b = naive_lml(&(&c + DMatrix::identity(n, n) * 0.05), &yv);
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));

            let fit = GpFit::condition(&c, &y, 0.05, KernelSource::Fixed { scale: 1.0 }, (0..n).collect()).unwrap();
            let cs = DMatrix::from_fn(2, n, |_, _| rng.random_range(-0.5..0.5));
            let pv = [3.0, 4.0];
            let p = predict(&fit, &cs, &pv).unwrap();
            let inv = (&c + DMatrix::identity(n, n) * 0.05).try_inverse().unwrap();
            let m = &cs * &inv * &yv;
            let v = &cs * &inv * cs.transpose();
            for i in 0..2 {
                assert!((p.mean[i] - m[i]).abs() < 1e-9);
                assert!((p.var[i] - (pv[i] - v[(i, i)])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_free_interpolation_and_prior_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let p = RbfParams::isotropic(1.5, 2.0).unwrap();
        let k = kernel_matrix(&p, &x, &x).unwrap();
        let y: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let fit = GpFit::condition(&k, &y, 0.0, KernelSource::Fixed { scale: 1.0 }, vec![]).unwrap();
        let pr = predict(&fit, &k, &vec![1.5; 6]).unwrap();
        for i in 0..6 {
            assert!((pr.mean[i] - y[i]).abs() < 1e-8);
            assert!(pr.var[i].abs() < 1e-8);
        }
        let far = predict(&fit, &DMatrix::zeros(1, 6), &[1.5]).unwrap();
        assert_eq!(far.mean[0], 0.0);
        assert_eq!(far.var[0], 1.5);
    }

    #[test]
    fn euclidean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ard in [false, true] {
            let x = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rho = if ard { vec![0.5, 1.5, 0.9] } else { vec![0.8] };
            let p = RbfParams { gamma: 1.2, rho, ard };
            let (_, g) = euclidean_lml_and_grad(&x, &y, &p, 0.1).unwrap();
            let mut t = vec![p.gamma.ln()];
            t.extend(p.rho.iter().map(|r| r.ln()));
            t.push((0.1f64 - NOISE_FLOOR).ln());
            let fd = crate::optim::finite_diff_grad(
                |t| -rbf_objective(&x, &DVector::from_column_slice(&y), ard, t).0,
                &t,
                1e-6,
            );
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_function_is_recovered() {
        let x = DMatrix::from_fn(12, 1, |i, _| i as f64 / 11.0);
        let y = vec![2.0; 12];
        let fit = fit_euclidean_gp(&x, &y, &EuclideanGpSpec::default()).unwrap();
        let p = predict_euclidean(&fit, &DMatrix::from_row_slice(2, 1, &[0.37, 0.81])).unwrap();
        for m in p.mean {
            assert!((m - 2.0).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn fitted_likelihood_beats_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: DMatrix<f64> = DMatrix::from_fn(15, 2, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..15).map(|i| (x[(i, 0)] * 1.3).sin() + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let fit = fit_euclidean_gp(&x, &y, &EuclideanGpSpec::default()).unwrap();
        let p0 = RbfParams::isotropic(1.0, 0.5).unwrap();
        let k0 = kernel_matrix(&p0, &x, &x).unwrap();
        assert!(fit.log_marginal >= log_marginal(&k0, &y, 0.1).unwrap());
    }

    fn synthetic_stack(pts: &DMatrix<f64>, times: &[f64]) -> HeatKernelStack {
        let n = pts.nrows();
        let sigma = times
            .iter()
            .map(|&t| {
                DMatrix::from_fn(n, n, |i, j| {
                    crate::analytic::euclidean_heat_kernel(&linalg::row_vec(pts, i), &linalg::row_vec(pts, j), t).unwrap()
                })
            })
            .collect();
        HeatKernelStack {
            dt: times[0],
            times: times.to_vec(),
            sigma,
            starts: (0..n).collect(),
            volumes: vec![1.0; n],
            n_paths: 1,
            omega: 1.0,
            seed: 0,
            mode: crate::heat::VolumeMode::Euclidean,
            stats: Default::default(),
        }
    }

    #[test]
    fn selected_time_recovers_generating_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let pts = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..4.0));
        let times: Vec<f64> = (1..=12).map(|k| 0.1 * k as f64).collect();
        let stack = synthetic_stack(&pts, &times);
        let true_k = 5;
        let cov = &stack.sigma[true_k] * 3.0 + DMatrix::identity(n, n) * 1e-3;
        let l = cov.cholesky().unwrap().l();
        let rows: Vec<usize> = (0..n).collect();
        let mut hits = 0;
        for rep in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + rep);
            let z = DVector::from_fn(n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
            let y: Vec<f64> = (&l * z).iter().cloned().collect();
            let spec = HeatGpSpec { min_noise_ratio: 0.0, ..Default::default() };
            let (_, s) = fit_heat_gp(&stack, &rows, &y, &spec).unwrap();
            if (s.selected_t_index as i64 - true_k as i64).abs() <= 2 {
                hits += 1;
            }
        }
        assert!(hits >= 16, "{hits}/20");
    }

    #[test]
    fn conditioning_from_summary_reproduces_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts = DMatrix::from_fn(15, 2, |_, _| rng.random_range(0.0..3.0));
        let stack = synthetic_stack(&pts, &[0.3, 0.6, 0.9]);
        let rows: Vec<usize> = (0..10).collect();
        let y: Vec<f64> = rows.iter().map(|&i| pts[(i, 1)].cos()).collect();
        let (fit, s) = fit_heat_gp(&stack, &rows, &y, &HeatGpSpec::default()).unwrap();
        let again = condition_heat(&stack, &rows, &y, &s).unwrap();
        let test: Vec<usize> = (10..15).collect();
        assert_eq!(predict_heat(&fit, &stack, &test).unwrap(), predict_heat(&again, &stack, &test).unwrap());
    }

    #[test]
    fn noise_floor_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = DMatrix::from_fn(12, 2, |_, _| rng.random_range(0.0..3.0));
        let stack = synthetic_stack(&pts, &[0.5, 1.0]);
        let y: Vec<f64> = (0..12).map(|i| pts[(i, 0)].sin()).collect();
        let ms = y.iter().map(|v| v * v).sum::<f64>() / 12.0;
        let (_, s) = fit_heat_gp(&stack, &(0..12).collect::<Vec<_>>(), &y, &HeatGpSpec::default()).unwrap();
        assert!(s.noise_var >= DEFAULT_MIN_NOISE_RATIO * ms);
        let bad = HeatGpSpec { min_noise_ratio: -1.0, ..Default::default() };
        assert!(fit_heat_gp(&stack, &[0, 1], &y[..2], &bad).is_err());
    }

    #[test]
    fn single_slice_and_rescaled_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = DMatrix::from_fn(10, 2, |_, _| rng.random_range(0.0..2.0));
        let stack = synthetic_stack(&pts, &[0.3]);
        let y: Vec<f64> = (0..10).map(|i| (pts[(i, 0)]).sin()).collect();
        let rows: Vec<usize> = (0..10).collect();
        let (fit, s) = fit_heat_gp(&stack, &rows, &y, &HeatGpSpec::default()).unwrap();
        assert_eq!(s.selected_t_index, 0);
        assert_eq!(s.curve.len(), 1);
        let p = predict_heat(&fit, &stack, &[0, 3]).unwrap();
        assert!(p.var.iter().all(|v| *v >= 0.0));

        let stack = synthetic_stack(&pts, &[0.1, 0.2, 0.4, 0.8]);
        let (_, s1) = fit_heat_gp(&stack, &rows, &y, &HeatGpSpec::default()).unwrap();
        let mut scaled = stack.clone();
        scaled.sigma.iter_mut().for_each(|m| *m *= 2.0);
        let (_, s2) = fit_heat_gp(&scaled, &rows, &y, &HeatGpSpec::default()).unwrap();
        assert_eq!(s1.selected_t_index, s2.selected_t_index);
        assert!((s1.log_marginal - s2.log_marginal).abs() < 1e-5 * s1.log_marginal.abs());
    }

    #[test]
    fn posterior_variance_below_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let xs = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..8).map(|i| x[(i, 1)]).collect();
        let fit = fit_euclidean_gp(&x, &y, &EuclideanGpSpec::default()).unwrap();
        let KernelSource::EuclideanRbf { params } = &fit.source else { unreachable!() };
        let p = predict_euclidean(&fit, &xs).unwrap();
        assert!(p.var.iter().all(|v| *v <= params.gamma + 1e-8));
    }
}

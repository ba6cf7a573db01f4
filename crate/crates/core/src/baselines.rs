//! Graph-Laplacian heat-kernel approximation used as a GP baseline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::heat::{unit_ball_volume, HeatKernelStack, VolumeMode};
use crate::linalg::{self, row_vec, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlConfig {
    pub epsilon: f64,
    /// Number of retained eigenpairs, including the constant one.
    pub k: usize,
    pub t: f64,
    /// Intrinsic dimension assumed by the eigenvector normalization.
    pub d: usize,
}

impl GlConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::domain(format!("graph bandwidth must be positive, got {}", self.epsilon)));
        }
        if self.k == 0 || self.k > n_points {
            return Err(Error::param(format!("need 1 <= K <= {n_points}, got {}", self.k)));
        }
        if !(self.t > 0.0) {
            return Err(Error::param(format!("diffusion time must be positive, got {}", self.t)));
        }
        if self.d == 0 {
            return Err(Error::param("intrinsic dimension must be at least 1"));
        }
        Ok(())
    }
}

fn pairwise_sq(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_vec(points, i)).collect();
    let cols = exec::map_range(n, |i| (0..n).map(|j| sq_dist(&rows[i], &rows[j])).collect::<Vec<_>>());
    DMatrix::from_fn(n, n, |i, j| cols[i][j])
}

/// A third of the median pairwise distance.
pub fn default_epsilon(points: &DMatrix<f64>) -> f64 {
    let d2 = pairwise_sq(points);
    let n = points.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push(d2[(i, j)].sqrt());
        }
    }
    if d.is_empty() {
        1.0
    } else {
        linalg::median(&d) / 3.0
    }
}

/// Density-normalized affinity `W_ij = k(x_i,x_j) / (q(x_i) q(x_j))` with
/// `k = exp(−‖x−x'‖²/4ε²)`, plus its row sums.
pub fn gl_affinity(points: &DMatrix<f64>, epsilon: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if points.nrows() < 2 {
        return Err(Error::param("graph Laplacian needs at least two points"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::domain(format!("graph bandwidth must be positive, got {epsilon}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite point coordinates"));
    }
    let k = pairwise_sq(points).map(|d| (-d / (4.0 * epsilon * epsilon)).exp());
    let q: Vec<f64> = k.row_iter().map(|r| r.sum()).collect();
    let w = DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] / (q[i] * q[j]));
    let d = DVector::from_iterator(w.nrows(), w.row_iter().map(|r| r.sum()));
    Ok((w, d))
}

/// Retained eigenpairs: `mu[i] = (1 − α_i)/ε²` ascending, eigenvectors as
/// columns of `vectors` after mapping back through `D^{-1/2}` and the
/// ball-count normalization.
#[derive(Debug, Clone)]
pub struct GlSpectrum {
    pub mu: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl GlSpectrum {
    /// `Σ_i e^{−μ_i t} v_i v_iᵀ`.
    pub fn kernel(&self, t: f64) -> DMatrix<f64> {
        let n = self.vectors.nrows();
        let mut h = DMatrix::zeros(n, n);
        for (i, mu) in self.mu.iter().enumerate() {
            let v = self.vectors.column(i);
            h.ger((-mu * t).exp(), &v, &v, 1.0);
        }
        linalg::symmetrize(&h)
    }
}

pub fn gl_spectrum(points: &DMatrix<f64>, w: &DMatrix<f64>, dsum: &DVector<f64>, epsilon: f64, k: usize, d: usize) -> Result<GlSpectrum> {
    let n = w.nrows();
    if w.ncols() != n || dsum.len() != n || points.nrows() != n {
        return Err(Error::shape("affinity, degrees and points disagree"));
    }
    if k == 0 || k > n {
        return Err(Error::param(format!("need 1 <= K <= {n}, got {k}")));
    }
    let dis: Vec<f64> = dsum.iter().map(|v| 1.0 / v.sqrt()).collect();
    let a = DMatrix::from_fn(n, n, |i, j| dis[i] * w[(i, j)] * dis[j]);
    let eig = SymmetricEigen::try_new(linalg::symmetrize(&a), 1e-14, 0)
        .ok_or_else(|| Error::linalg("graph eigen-decomposition did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let d2 = pairwise_sq(points);
    let counts: Vec<f64> = (0..n).map(|i| d2.row(i).iter().filter(|&&v| v <= epsilon * epsilon).count() as f64).collect();
    let vol = unit_ball_volume(d) * epsilon.powi(d as i32);

    let mut mu = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        mu.push((1.0 - eig.eigenvalues[idx]) / (epsilon * epsilon));
        let mut v: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, idx)] * dis[i]).collect();
        let norm = (vol * v.iter().zip(&counts).map(|(x, c)| x * x / c).sum::<f64>()).sqrt();
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = v.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 } / norm;
        v.iter_mut().for_each(|x| *x *= s);
        vectors.set_column(c, &DVector::from_vec(v));
    }
    Ok(GlSpectrum { mu, vectors })
}

pub fn gl_kernel(points: &DMatrix<f64>, cfg: &GlConfig) -> Result<DMatrix<f64>> {
    cfg.validate(points.nrows())?;
    let (w, dsum) = gl_affinity(points, cfg.epsilon)?;
    Ok(gl_spectrum(points, &w, &dsum, cfg.epsilon, cfg.k, cfg.d)?.kernel(cfg.t))
}

impl GlSpectrum {
    /// Smallest retained nonzero eigenvalue, if any.
    pub fn spectral_gap(&self) -> Option<f64> {
        self.mu.iter().cloned().find(|m| *m > 1e-8)
    }

    /// `n` diffusion times log-spaced so that `t·μ_1` spans `[1e-2, 1e2]`.
    pub fn time_grid(&self, n: usize) -> Result<Vec<f64>> {
        let gap = self.spectral_gap().ok_or_else(|| Error::param("no nonzero eigenvalue retained; increase K"))?;
        if n == 0 {
            return Err(Error::param("need at least one diffusion time"));
        }
        let (a, b) = ((1e-2 / gap).ln(), (1e2 / gap).ln());
        Ok((0..n).map(|k| if n == 1 { 1.0 / gap } else { (a + (b - a) * k as f64 / (n - 1) as f64).exp() }).collect())
    }

    /// Kernels at several diffusion times packed as a stack over all points,
    /// so the heat-GP fitting and prediction paths apply unchanged.
    pub fn stack(&self, times: &[f64], epsilon: f64) -> Result<HeatKernelStack> {
        if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::param("diffusion times must be positive and non-empty"));
        }
        let n = self.vectors.nrows();
        Ok(HeatKernelStack {
            dt: times[0],
            times: times.to_vec(),
            sigma: exec::map_range(times.len(), |k| self.kernel(times[k])),
            starts: (0..n).collect(),
            volumes: vec![1.0; n],
            n_paths: 0,
            omega: epsilon,
            seed: 0,
            mode: VolumeMode::Euclidean,
            stats: Default::default(),
        })
    }
}

pub fn gl_stack(points: &DMatrix<f64>, cfg: &GlConfig, times: &[f64]) -> Result<HeatKernelStack> {
    cfg.validate(points.nrows())?;
    let (w, dsum) = gl_affinity(points, cfg.epsilon)?;
    gl_spectrum(points, &w, &dsum, cfg.epsilon, cfg.k, cfg.d)?.stack(times, cfg.epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            if j == 0 {
                a.cos()
            } else {
                a.sin()
            }
        })
    }

    #[test]
    fn affinity_is_symmetric_and_monotone() {
        let p = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let (w, d) = gl_affinity(&p, 1.0).unwrap();
        assert!(linalg::max_asymmetry(&w) < 1e-12);
        assert!(w[(0, 1)] > w[(0, 2)]);
        assert!((d[0] - w.row(0).sum()).abs() < 1e-15);
        let dup = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let (w, _) = gl_affinity(&dup, 1.0).unwrap();
        assert!((w[(0, 1)] - w[(0, 0)]).abs() < 1e-15);
        assert!(gl_affinity(&p, 0.0).is_err());
    }

    fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let s = (qa.transpose() * qb).singular_values();
        s.min().clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn circle_spectrum() {
        let n = 200;
        let p = circle(n);
        let eps = 0.1;
        let (w, d) = gl_affinity(&p, eps).unwrap();
        let sp = gl_spectrum(&p, &w, &d, eps, 5, 1).unwrap();
        assert!(sp.mu[0].abs() < 1e-8, "{}", sp.mu[0]);
        assert!(sp.mu.iter().all(|m| *m >= -1e-8));
        assert!((sp.mu[1] - sp.mu[2]).abs() < 1e-6 * sp.mu[1]);
        assert!(sp.mu[3] > 2.0 * sp.mu[2]);
        let pair = sp.vectors.columns(1, 2).into_owned();
        assert!(principal_angle(&pair, &p) < 5.0);
    }

    #[test]
    fn kernel_properties() {
        let p = DMatrix::from_fn(30, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 + 0.01 * i as f64);
        let eps = default_epsilon(&p);
        let cfg = GlConfig { epsilon: eps, k: 1, t: 1.0, d: 2 };
        let h1 = gl_kernel(&p, &cfg).unwrap();
        assert_eq!(linalg::max_asymmetry(&h1), 0.0);
        let s = h1.clone().symmetric_eigen().eigenvalues;
        assert_eq!(s.iter().filter(|v| v.abs() > 1e-10 * s.amax()).count(), 1);
        let mut prev = h1;
        for k in 2..8 {
            let h = gl_kernel(&p, &GlConfig { k, ..cfg }).unwrap();
            assert!(linalg::min_eigenvalue(&h) >= -1e-8);
            for i in 0..30 {
                assert!(h[(i, i)] >= prev[(i, i)] - 1e-12);
            }
            prev = h;
        }
        let (w, d) = gl_affinity(&p, eps).unwrap();
        let sp = gl_spectrum(&p, &w, &d, eps, 4, 2).unwrap();
        let proj = &sp.vectors * sp.vectors.transpose();
        assert!((sp.kernel(1e-12) - &proj).amax() < 1e-9 * proj.amax());
    }

    #[test]
    fn config_validation() {
        let p = circle(10);
        assert!(gl_kernel(&p, &GlConfig { epsilon: 0.3, k: 11, t: 1.0, d: 1 }).is_err());
        assert!(gl_kernel(&p, &GlConfig { epsilon: -1.0, k: 2, t: 1.0, d: 1 }).is_err());
        let st = gl_stack(&p, &GlConfig { epsilon: 0.3, k: 3, t: 1.0, d: 1 }, &[0.5, 1.0]).unwrap();
        assert_eq!(st.sigma.len(), 2);
        assert_eq!(st.n_starts(), 10);
    }
}

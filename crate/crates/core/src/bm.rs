//! Brownian motion in a chart, simulated with the Euler–Maruyama scheme of
//! the Laplace–Beltrami diffusion and a reflecting boundary realized by
//! rejecting proposals that leave the domain.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticManifold;
use crate::error::{Error, Result};
use crate::exec;
use crate::lvm::{BoundarySpec, MetricField};

/// Metric tensor, its inverse and coordinate gradient at one point.
#[derive(Debug, Clone)]
pub struct MetricValue {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub dg: Vec<DMatrix<f64>>,
}

impl MetricValue {
    pub fn new(g: DMatrix<f64>, dg: Vec<DMatrix<f64>>) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(g.clone())
            .ok_or_else(|| Error::linalg("metric tensor is not positive definite"))?;
        Ok(MetricValue { g_inv: chol.inverse(), g, dg })
    }
}

/// A metric field on a (possibly bounded) chart.
pub trait MetricSource: Sync {
    fn dim(&self) -> usize;
    fn metric(&self, x: &[f64]) -> Result<MetricValue>;
    fn inside(&self, x: &[f64]) -> Result<bool>;
    /// `√det G(x)`, the Riemannian volume density.
    fn volume_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.metric(x)?.g.determinant().max(0.0).sqrt())
    }
}

impl MetricSource for AnalyticManifold {
    fn dim(&self) -> usize {
        AnalyticManifold::dim(self)
    }
    fn metric(&self, x: &[f64]) -> Result<MetricValue> {
        MetricValue::new(AnalyticManifold::metric(self, x), self.metric_grad(x))
    }
    fn inside(&self, x: &[f64]) -> Result<bool> {
        Ok(self.contains(x))
    }
}

/// Expected metric of a trained latent model, optionally bounded by a level
/// set of the mapping variance.
#[derive(Debug, Clone)]
pub struct LearnedMetric {
    pub field: MetricField,
    pub boundary: Option<BoundarySpec>,
}

impl MetricSource for LearnedMetric {
    fn dim(&self) -> usize {
        self.field.latent_dim()
    }
    fn metric(&self, x: &[f64]) -> Result<MetricValue> {
        let ev = self.field.metric_eval(x)?;
        MetricValue::new(ev.g, ev.dg)
    }
    fn inside(&self, x: &[f64]) -> Result<bool> {
        match &self.boundary {
            None => Ok(true),
            Some(b) => crate::lvm::inside_boundary(&self.field, b, x),
        }
    }
    fn volume_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.field.metric_eval(x)?.mf)
    }
}

/// Drift per unit time from an evaluated metric.
pub fn drift_from(mv: &MetricValue) -> Vec<f64> {
    let q = mv.g.nrows();
    let gi = &mv.g_inv;
    let mut mu = vec![0.0; q];
    for j in 0..q {
        let a = gi * &mv.dg[j];
        let tr = a.trace();
        let b = &a * gi;
        for (i, m) in mu.iter_mut().enumerate() {
            *m += -0.5 * b[(i, j)] + 0.25 * gi[(i, j)] * tr;
        }
    }
    mu
}

/// Drift of the diffusion generated by half the Laplace–Beltrami operator.
pub fn drift(metric: &dyn MetricSource, x: &[f64]) -> Result<Vec<f64>> {
    check_point(metric, x)?;
    Ok(drift_from(&metric.metric(x)?))
}

/// Symmetric square root of `G⁻¹`.
pub fn inv_sqrt(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(g.clone());
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::linalg("metric tensor is not positive definite"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn check_point(metric: &dyn MetricSource, x: &[f64]) -> Result<()> {
    if x.len() != metric.dim() {
        return Err(Error::shape(format!("point of dimension {} for a {}-d chart", x.len(), metric.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite latent point"));
    }
    Ok(())
}

/// Mean `x + μΔt` and factor `√Δt·G^{-1/2}` of the step proposal from `x`.
struct Proposal {
    mean: Vec<f64>,
    factor: DMatrix<f64>,
}

impl Proposal {
    fn at(metric: &dyn MetricSource, x: &[f64], dt: f64) -> Result<Self> {
        let mv = metric.metric(x)?;
        let mu = drift_from(&mv);
        let mean = x.iter().zip(&mu).map(|(a, b)| a + b * dt).collect();
        let factor = inv_sqrt(&mv.g)? * dt.sqrt();
        Ok(Proposal { mean, factor })
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let q = self.mean.len();
        let mut xi = [0.0f64; 8];
        let mut xi_heap;
        let z: &mut [f64] = if q <= 8 {
            &mut xi[..q]
        } else {
            xi_heap = vec![0.0; q];
            &mut xi_heap
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..q {
            let mut s = self.mean[i];
            for j in 0..q {
                s += self.factor[(i, j)] * z[j];
            }
            out[i] = s;
        }
    }
}

/// One draw from `N(x + μ(x)Δt, Δt G(x)⁻¹)`, ignoring the boundary.
pub fn propose_step<R: Rng>(metric: &dyn MetricSource, x: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_point(metric, x)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param(format!("time step must be positive, got {dt}")));
    }
    let p = Proposal::at(metric, x, dt)?;
    let mut out = vec![0.0; x.len()];
    p.draw(rng, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub max_rejects: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { dt: 0.5, n_steps: 100, n_paths: 2000, seed: 0, max_rejects: 100 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param(format!("time step must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 || self.n_paths == 0 || self.max_rejects == 0 {
            return Err(Error::param("step count, path count and rejection cap must all be positive"));
        }
        Ok(())
    }

    /// Diffusion time after `k` steps.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Proposal bookkeeping for a simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub steps: u64,
    pub proposals: u64,
    pub rejections: u64,
    /// Steps where every proposal up to the cap fell outside and the path
    /// stayed in place.
    pub stuck_steps: u64,
}

impl SimStats {
    pub fn rejection_fraction(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.rejections as f64 / self.proposals as f64
        }
    }

    pub fn merge(&mut self, o: &SimStats) {
        self.steps += o.steps;
        self.proposals += o.proposals;
        self.rejections += o.rejections;
        self.stuck_steps += o.stuck_steps;
    }
}

/// Simulate path `path` of an ensemble, calling `visit(step, x)` after every
/// completed step (`step` runs from 1 to `n_steps`).
pub fn run_path(
    metric: &dyn MetricSource,
    start: &[f64],
    cfg: &SimConfig,
    path: u64,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<SimStats> {
    let mut rng = exec::stream_rng(cfg.seed, path);
    let q = start.len();
    let mut x = start.to_vec();
    let mut cand = vec![0.0; q];
    let mut stats = SimStats::default();
    let mut prop = Proposal::at(metric, &x, cfg.dt)?;
    for step in 1..=cfg.n_steps {
        stats.steps += 1;
        let mut moved = false;
        for _ in 0..cfg.max_rejects {
            prop.draw(&mut rng, &mut cand);
            stats.proposals += 1;
            if cand.iter().all(|v| v.is_finite()) && metric.inside(&cand)? {
                moved = true;
                break;
            }
            stats.rejections += 1;
        }
        if moved {
            x.copy_from_slice(&cand);
            prop = Proposal::at(metric, &x, cfg.dt)?;
        } else {
            stats.stuck_steps += 1;
        }
        visit(step, &x);
    }
    Ok(stats)
}

/// Sample paths from one start point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub start: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    /// Row-major `n_paths × n_steps × q` positions after each step.
    pub positions: Vec<f64>,
    pub stats: SimStats,
}

impl TrajectoryEnsemble {
    pub fn dim(&self) -> usize {
        self.start.len()
    }

    /// Position of `path` after `step` steps; step 0 is the start.
    pub fn position(&self, path: usize, step: usize) -> &[f64] {
        if step == 0 {
            return &self.start;
        }
        let q = self.dim();
        let o = (path * self.n_steps + step - 1) * q;
        &self.positions[o..o + q]
    }

    pub fn endpoints(&self) -> Vec<&[f64]> {
        (0..self.n_paths).map(|p| self.position(p, self.n_steps)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let q = self.dim();
        let start: Vec<String> = self.start.iter().map(|v| format!("{v:e}")).collect();
        writeln!(
            w,
            "# q={q} n_paths={} n_steps={} dt={:e} seed={} start={}",
            self.n_paths,
            self.n_steps,
            self.dt,
            self.seed,
            start.join(";")
        )?;
        let cols: Vec<String> = (1..=q).map(|i| format!("x{i}")).collect();
        writeln!(w, "path,step,{}", cols.join(","))?;
        for p in 0..self.n_paths {
            for s in 1..=self.n_steps {
                let x: Vec<String> = self.position(p, s).iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{p},{s},{}", x.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| Error::data("empty trajectory file"))??;
        let mut q = None;
        let (mut n_paths, mut n_steps, mut dt, mut seed, mut start) = (None, None, None, None, None);
        for tok in header.trim_start_matches('#').split_whitespace() {
            let Some((k, v)) = tok.split_once('=') else { continue };
            let bad = || Error::data(format!("bad trajectory header field {tok}"));
            match k {
                "q" => q = Some(v.parse::<usize>().map_err(|_| bad())?),
                "n_paths" => n_paths = Some(v.parse::<usize>().map_err(|_| bad())?),
                "n_steps" => n_steps = Some(v.parse::<usize>().map_err(|_| bad())?),
                "dt" => dt = Some(v.parse::<f64>().map_err(|_| bad())?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                "start" => {
                    start = Some(v.split(';').map(|s| s.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?)
                }
                _ => {}
            }
        }
        let (Some(q), Some(n_paths), Some(n_steps), Some(dt), Some(seed), Some(start)) =
            (q, n_paths, n_steps, dt, seed, start)
        else {
            return Err(Error::data("trajectory header lacks q, n_paths, n_steps, dt, seed or start"));
        };
        if start.len() != q {
            return Err(Error::data("trajectory start has wrong dimension"));
        }
        lines.next();
        let mut positions = vec![f64::NAN; n_paths * n_steps * q];
        let mut seen = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != q + 2 {
                return Err(Error::data(format!("trajectory row with {} fields, expected {}", f.len(), q + 2)));
            }
            let p: usize = f[0].parse().map_err(|_| Error::data("bad path index"))?;
            let s: usize = f[1].parse().map_err(|_| Error::data("bad step index"))?;
            if p >= n_paths || s == 0 || s > n_steps {
                return Err(Error::data(format!("trajectory row ({p},{s}) out of range")));
            }
            let o = (p * n_steps + s - 1) * q;
            for d in 0..q {
                positions[o + d] = f[2 + d].trim().parse().map_err(|_| Error::data("bad coordinate"))?;
            }
            seen += 1;
        }
        if seen != n_paths * n_steps {
            return Err(Error::data(format!("expected {} trajectory rows, found {seen}", n_paths * n_steps)));
        }
        Ok(TrajectoryEnsemble { start, dt, seed, n_paths, n_steps, positions, stats: SimStats::default() })
    }
}

/// Simulate `cfg.n_paths` independent paths from `start`. Path `i` draws from
/// its own random stream, so the ensemble does not depend on scheduling.
pub fn simulate(metric: &dyn MetricSource, start: &[f64], cfg: &SimConfig) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    check_point(metric, start)?;
    if !metric.inside(start)? {
        return Err(Error::domain(format!("start point {start:?} lies outside the boundary")));
    }
    let q = start.len();
    let per_path = exec::try_map_range(cfg.n_paths, |p| {
        let mut pos = Vec::with_capacity(cfg.n_steps * q);
        let st = run_path(metric, start, cfg, p as u64, |_, x| pos.extend_from_slice(x))?;
        Ok::<_, Error>((pos, st))
    })?;
    let mut positions = Vec::with_capacity(cfg.n_paths * cfg.n_steps * q);
    let mut stats = SimStats::default();
    for (pos, st) in per_path {
        positions.extend(pos);
        stats.merge(&st);
    }
    Ok(TrajectoryEnsemble {
        start: start.to_vec(),
        dt: cfg.dt,
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        n_steps: cfg.n_steps,
        positions,
        stats,
    })
}

/// Final positions only, for long runs where storing paths is wasteful.
pub fn simulate_endpoints(metric: &dyn MetricSource, start: &[f64], cfg: &SimConfig) -> Result<(Vec<Vec<f64>>, SimStats)> {
    cfg.validate()?;
    check_point(metric, start)?;
    if !metric.inside(start)? {
        return Err(Error::domain(format!("start point {start:?} lies outside the boundary")));
    }
    let n_steps = cfg.n_steps;
    let per_path = exec::try_map_range(cfg.n_paths, |p| {
        let mut last = start.to_vec();
        let st = run_path(metric, start, cfg, p as u64, |s, x| {
            if s == n_steps {
                last.copy_from_slice(x)
            }
        })?;
        Ok::<_, Error>((last, st))
    })?;
    let mut stats = SimStats::default();
    let ends = per_path
        .into_iter()
        .map(|(e, st)| {
            stats.merge(&st);
            e
        })
        .collect();
    Ok((ends, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticManifold;

    #[test]
    fn flat_metric_has_no_drift() {
        let m = AnalyticManifold::euclidean(3);
        assert_eq!(drift(&m, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn swiss_roll_drift_matches_closed_form() {
        let m = AnalyticManifold::swiss_roll().with_domain(None);
        let d = drift(&m, &[1.0, 0.5]).unwrap();
        assert!((d[0] + 0.125).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        for r in [2.0, 5.5, 12.0] {
            let d = drift(&m, &[r, 3.0]).unwrap();
            assert!((d[0] + 0.5 * r / (1.0 + r * r).powi(2)).abs() < 1e-14);
        }
    }

    /// Ito drift `½ det^{-1/2} Σ_j ∂_j(G^{ij} √det)` by central differences.
    fn ito_drift_fd(m: &AnalyticManifold, x: &[f64]) -> Vec<f64> {
        let q = x.len();
        let h = 1e-5;
        let f = |y: &[f64], i: usize, j: usize| {
            let g = AnalyticManifold::metric(m, y);
            g.clone().try_inverse().unwrap()[(i, j)] * g.determinant().sqrt()
        };
        let sd = AnalyticManifold::metric(m, x).determinant().sqrt();
        (0..q)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..q {
                    let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                    xp[j] += h;
                    xm[j] -= h;
                    s += (f(&xp, i, j) - f(&xm, i, j)) / (2.0 * h);
                }
                0.5 * s / sd
            })
            .collect()
    }

    #[test]
    fn drift_equals_ito_form() {
        let base = AnalyticManifold::swiss_roll().with_domain(None);
        for scale in [[1.0, 1.0], [2.0, 1.0], [0.7, 3.0]] {
            let m = crate::analytic::rescaled_chart(&base, &scale).unwrap();
            for r in [2.0, 4.0, 9.0] {
                let x = m.from_base(&[r, 1.0]);
                let a = drift(&m, &x).unwrap();
                let b = ito_drift_fd(&m, &x);
                for i in 0..2 {
                    assert!((a[i] - b[i]).abs() < 1e-8, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn proposal_moments_flat() {
        let m = AnalyticManifold::euclidean(2);
        let mut rng = exec::stream_rng(1, 0);
        let n = 100_000;
        let (mut s, mut ss, mut sxy) = ([0.0; 2], [0.0; 2], 0.0);
        for _ in 0..n {
            let y = propose_step(&m, &[0.5, -0.5], 1.0, &mut rng).unwrap();
            let d = [y[0] - 0.5, y[1] + 0.5];
            for i in 0..2 {
                s[i] += d[i];
                ss[i] += d[i] * d[i];
            }
            sxy += d[0] * d[1];
        }
        let nf = n as f64;
        for i in 0..2 {
            assert!((s[i] / nf).abs() < 4.0 / nf.sqrt());
            assert!((ss[i] / nf - 1.0).abs() < 0.05);
        }
        assert!((sxy / nf).abs() < 0.05);
    }

    #[test]
    fn proposal_variance_scales_with_dt() {
        let m = AnalyticManifold::euclidean(1);
        for dt in [1e-1, 1e-2, 1e-3] {
            let mut rng = exec::stream_rng(2, 0);
            let n = 20_000;
            let v: f64 = (0..n).map(|_| propose_step(&m, &[0.0], dt, &mut rng).unwrap()[0].powi(2)).sum::<f64>() / n as f64;
            assert!((v / dt - 1.0).abs() < 0.05, "dt={dt}: {v}");
        }
    }

    #[test]
    fn swiss_roll_step_shrinks_with_radius() {
        let m = AnalyticManifold::swiss_roll().with_domain(None);
        let dt = 0.1;
        for r in [3.0f64, 10.0] {
            let mut rng = exec::stream_rng(3, r as u64);
            let n = 20_000;
            let mean_r = r - 0.5 * r / (1.0 + r * r).powi(2) * dt;
            let v = (0..n)
                .map(|_| (propose_step(&m, &[r, 4.0], dt, &mut rng).unwrap()[0] - mean_r).powi(2))
                .sum::<f64>()
                / n as f64;
            let expect = dt / (1.0 + r * r);
            assert!((v / expect - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn one_step_endpoints_are_gaussian() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.7, n_steps: 1, n_paths: 100_000, seed: 9, max_rejects: 10 };
        let ens = simulate(&m, &[1.0, 2.0], &cfg).unwrap();
        let n = cfg.n_paths as f64;
        for d in 0..2 {
            let xs: Vec<f64> = ens.endpoints().iter().map(|e| e[d] - [1.0, 2.0][d]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| v * v).sum::<f64>() / n;
            assert!(mean.abs() < 4.0 * (0.7 / n).sqrt());
            assert!((var / 0.7 - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn start_outside_is_rejected() {
        let m = AnalyticManifold::euclidean(2).with_domain(Some(vec![(0.0, 1.0), (0.0, 1.0)]));
        let cfg = SimConfig { n_paths: 2, n_steps: 2, ..Default::default() };
        assert!(matches!(simulate(&m, &[1.5, 0.5], &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn recorded_states_stay_inside_and_stuck_paths_stay_put() {
        let m = AnalyticManifold::euclidean(2).with_domain(Some(vec![(0.0, 1.0), (0.0, 1.0)]));
        let cfg = SimConfig { dt: 0.05, n_steps: 40, n_paths: 200, seed: 4, max_rejects: 100 };
        let ens = simulate(&m, &[0.1, 0.9], &cfg).unwrap();
        assert!(ens.positions.chunks(2).all(|x| m.contains(x)));
        assert!(ens.stats.rejections > 0);
        // huge steps with a cap of one proposal: most steps get stuck
        let cfg = SimConfig { dt: 100.0, n_steps: 5, n_paths: 50, seed: 4, max_rejects: 1 };
        let ens = simulate(&m, &[0.5, 0.5], &cfg).unwrap();
        assert!(ens.stats.stuck_steps > 0);
        assert!(ens.positions.chunks(2).all(|x| m.contains(x)));
    }

    #[test]
    fn deterministic_across_schedules() {
        let m = crate::analytic::AnalyticManifold::swiss_roll();
        let cfg = SimConfig { dt: 0.5, n_steps: 20, n_paths: 300, seed: 77, max_rejects: 100 };
        let a = simulate(&m, &[6.0, 4.0], &cfg).unwrap();
        let b = exec::sequential(|| simulate(&m, &[6.0, 4.0], &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.25, n_steps: 3, n_paths: 4, seed: 1, max_rejects: 5 };
        let ens = simulate(&m, &[0.0, 1.0], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        ens.write_csv(&p).unwrap();
        let back = TrajectoryEnsemble::read_csv(&p).unwrap();
        assert_eq!(back.positions, ens.positions);
        assert_eq!((back.n_paths, back.n_steps, back.dt, back.seed), (4, 3, 0.25, 1));
    }
}

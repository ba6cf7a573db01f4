//! Heat kernel as Brownian-motion transition density: the fraction of paths
//! inside a small ball around the target at time `t`, divided by the ball's
//! volume.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bm::{run_path, MetricSource, SimConfig, SimStats, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{median, nearest_neighbor_distances, row_vec, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMode {
    /// Ball volume measured with the metric at the target.
    Riemannian,
    /// Coordinate volume of the ball.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    /// Ball radius in chart coordinates.
    pub omega: f64,
    pub volume_mode: VolumeMode,
}

impl NeighborhoodSpec {
    pub fn new(omega: f64, volume_mode: VolumeMode) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::param(format!("neighbourhood radius must be positive, got {omega}")));
        }
        Ok(NeighborhoodSpec { omega, volume_mode })
    }
}

/// Fraction of median nearest-neighbour distance used by [`default_omega`].
pub const DEFAULT_OMEGA_FRACTION: f64 = 0.3;

/// `0.3 ×` the median nearest-neighbour distance among `latents`.
pub fn default_omega(latents: &DMatrix<f64>) -> f64 {
    DEFAULT_OMEGA_FRACTION * median(&nearest_neighbor_distances(latents))
}

/// Volume of the unit ball in `q` dimensions, `π^{q/2} / Γ(q/2 + 1)`.
pub fn unit_ball_volume(q: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_q = 2π/q · V_{q-2}
    let mut v = if q % 2 == 0 { 1.0 } else { 2.0 };
    let mut k = if q % 2 == 0 { 2 } else { 3 };
    while k <= q {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v
}

/// `V(A) = V_q ω^q` times `√det G(target)` in Riemannian mode.
pub fn neighborhood_volume(metric: &dyn MetricSource, target: &[f64], spec: &NeighborhoodSpec) -> Result<f64> {
    let q = target.len();
    let flat = unit_ball_volume(q) * spec.omega.powi(q as i32);
    match spec.volume_mode {
        VolumeMode::Euclidean => Ok(flat),
        VolumeMode::Riemannian => {
            let sd = metric.volume_density(target)?;
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::linalg(format!("degenerate metric volume {sd} at target")));
            }
            Ok(flat * sd)
        }
    }
}

fn check_step(t_index: usize, n_steps: usize) -> Result<()> {
    if t_index == 0 || t_index > n_steps {
        return Err(Error::param(format!("time index {t_index} outside 1..={n_steps}")));
    }
    Ok(())
}

/// `N_A / N_BM` for the ball of radius `omega` around `target` at step `t_index`.
pub fn transition_probability(ens: &TrajectoryEnsemble, target: &[f64], omega: f64, t_index: usize) -> Result<f64> {
    check_step(t_index, ens.n_steps)?;
    if target.len() != ens.dim() {
        return Err(Error::shape("target dimension differs from the ensemble"));
    }
    let r2 = omega * omega;
    let hits = (0..ens.n_paths).filter(|&p| sq_dist(ens.position(p, t_index), target) <= r2).count();
    Ok(hits as f64 / ens.n_paths as f64)
}

pub fn density_estimate(
    ens: &TrajectoryEnsemble,
    target: &[f64],
    spec: &NeighborhoodSpec,
    t_index: usize,
    metric: &dyn MetricSource,
) -> Result<f64> {
    let p = transition_probability(ens, target, spec.omega, t_index)?;
    Ok(p / neighborhood_volume(metric, target, spec)?)
}

/// Targets sorted along their first coordinate for radius queries.
struct TargetIndex {
    q: usize,
    order: Vec<usize>,
    key: Vec<f64>,
    points: Vec<Vec<f64>>,
}

impl TargetIndex {
    fn new(targets: &DMatrix<f64>) -> Self {
        let points: Vec<Vec<f64>> = (0..targets.nrows()).map(|i| row_vec(targets, i)).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
        let key = order.iter().map(|&i| points[i][0]).collect();
        TargetIndex { q: targets.ncols(), order, key, points }
    }

    fn for_each_within(&self, x: &[f64], omega: f64, mut f: impl FnMut(usize)) {
        let r2 = omega * omega;
        let lo = self.key.partition_point(|k| *k < x[0] - omega);
        for pos in lo..self.key.len() {
            if self.key[pos] > x[0] + omega {
                break;
            }
            let j = self.order[pos];
            let p = &self.points[j];
            let mut d = 0.0;
            for k in 0..self.q {
                let e = p[k] - x[k];
                d += e * e;
            }
            if d <= r2 {
                f(j);
            }
        }
    }
}

const PATH_BATCH: usize = 64;

/// Hit counts `n_steps × n_targets` (or `1 × n_targets` when only `only_step`
/// is recorded) for paths from `start`.
fn count_hits(
    metric: &dyn MetricSource,
    start: &[f64],
    index: &TargetIndex,
    omega: f64,
    cfg: &SimConfig,
    only_step: Option<usize>,
) -> Result<(Vec<u64>, SimStats)> {
    let nt = index.points.len();
    let rows = if only_step.is_some() { 1 } else { cfg.n_steps };
    let n_batches = cfg.n_paths.div_ceil(PATH_BATCH);
    let batches = exec::try_map_range(n_batches, |b| {
        let mut counts = vec![0u32; rows * nt];
        let mut stats = SimStats::default();
        for p in b * PATH_BATCH..((b + 1) * PATH_BATCH).min(cfg.n_paths) {
            let st = run_path(metric, start, cfg, p as u64, |step, x| {
                let row = match only_step {
                    None => step - 1,
                    Some(k) if k == step => 0,
                    Some(_) => return,
                };
                index.for_each_within(x, omega, |j| counts[row * nt + j] += 1);
            })?;
            stats.merge(&st);
        }
        Ok::<_, Error>((counts, stats))
    })?;
    let mut total = vec![0u64; rows * nt];
    let mut stats = SimStats::default();
    for (c, st) in batches {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v as u64;
        }
        stats.merge(&st);
    }
    Ok((total, stats))
}

fn check_inside(metric: &dyn MetricSource, pts: &DMatrix<f64>, what: &str) -> Result<()> {
    if pts.ncols() != metric.dim() {
        return Err(Error::shape(format!("{what} of dimension {} for a {}-d chart", pts.ncols(), metric.dim())));
    }
    for i in 0..pts.nrows() {
        let x = row_vec(pts, i);
        if x.iter().any(|v| !v.is_finite()) || !metric.inside(&x)? {
            return Err(Error::domain(format!("{what} {i} lies outside the boundary")));
        }
    }
    Ok(())
}

/// Raw density estimates `K̂^t(start_i, target_j)` for every step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatKernelStack {
    pub dt: f64,
    /// `times[k] = (k+1)·dt`.
    pub times: Vec<f64>,
    /// One `n_starts × n_targets` matrix per time.
    pub sigma: Vec<DMatrix<f64>>,
    /// Index of each start among the targets.
    pub starts: Vec<usize>,
    /// Neighbourhood volume of each target.
    pub volumes: Vec<f64>,
    pub n_paths: usize,
    pub omega: f64,
    pub seed: u64,
    pub mode: VolumeMode,
    pub stats: SimStats,
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    dt: f64,
    times: Vec<f64>,
    starts: Vec<usize>,
    volumes: Vec<f64>,
    n_paths: usize,
    omega: f64,
    seed: u64,
    mode: VolumeMode,
    stats: SimStats,
}

impl HeatKernelStack {
    pub fn n_starts(&self) -> usize {
        self.starts.len()
    }

    pub fn n_targets(&self) -> usize {
        self.volumes.len()
    }

    /// Index into [`HeatKernelStack::sigma`] of diffusion time `t`, which must
    /// be a whole number of steps.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        time_steps(t, self.dt, self.times.len()).map(|k| k - 1)
    }

    /// Binomial standard error of entry `(i, j)` at time index `k`.
    pub fn stderr(&self, k: usize, i: usize, j: usize) -> f64 {
        let v = self.volumes[j];
        let p = (self.sigma[k][(i, j)] * v).clamp(0.0, 1.0);
        (p * (1.0 - p) / self.n_paths as f64).sqrt() / v
    }

    /// Symmetrized covariance among the starts listed in `rows`
    /// (indices into [`HeatKernelStack::starts`]).
    pub fn start_block(&self, k: usize, rows: &[usize]) -> DMatrix<f64> {
        let s = &self.sigma[k];
        let n = rows.len();
        DMatrix::from_fn(n, n, |a, b| {
            0.5 * (s[(rows[a], self.starts[rows[b]])] + s[(rows[b], self.starts[rows[a]])])
        })
    }

    /// Covariance between arbitrary targets (rows) and the starts in `rows`
    /// (columns), read from the start-generated rows.
    pub fn cross_block(&self, k: usize, targets: &[usize], rows: &[usize]) -> DMatrix<f64> {
        let s = &self.sigma[k];
        DMatrix::from_fn(targets.len(), rows.len(), |a, b| s[(rows[b], targets[a])])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = StackMeta {
            dt: self.dt,
            times: self.times.clone(),
            starts: self.starts.clone(),
            volumes: self.volumes.clone(),
            n_paths: self.n_paths,
            omega: self.omega,
            seed: self.seed,
            mode: self.mode,
            stats: self.stats,
        };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("meta.json"))?, &meta)?;
        for (k, m) in self.sigma.iter().enumerate() {
            crate::csvio::write_matrix(&dir.join(format!("sigma_{:04}.csv", k + 1)), m, None)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StackMeta = serde_json::from_reader(std::fs::File::open(dir.join("meta.json"))?)?;
        let mut sigma = Vec::with_capacity(meta.times.len());
        for k in 0..meta.times.len() {
            let m = crate::csvio::read_matrix(&dir.join(format!("sigma_{:04}.csv", k + 1)))?;
            if m.shape() != (meta.starts.len(), meta.volumes.len()) {
                return Err(Error::shape(format!("stack slice {} has shape {:?}", k + 1, m.shape())));
            }
            sigma.push(m);
        }
        Ok(HeatKernelStack {
            dt: meta.dt,
            times: meta.times,
            sigma,
            starts: meta.starts,
            volumes: meta.volumes,
            n_paths: meta.n_paths,
            omega: meta.omega,
            seed: meta.seed,
            mode: meta.mode,
            stats: meta.stats,
        })
    }
}

fn time_steps(t: f64, dt: f64, n_steps: usize) -> Result<usize> {
    let k = (t / dt).round();
    if !(k >= 1.0) || k > n_steps as f64 || (k * dt - t).abs() > 1e-9 * t.abs().max(dt) {
        return Err(Error::param(format!("time {t} is not a step of the grid dt={dt}, n_steps={n_steps}")));
    }
    Ok(k as usize)
}

/// Simulate from every row of `starts` (given as indices into `targets`) and
/// estimate the density at every target for every step. Row `i` uses seed
/// `derive_seed(cfg.seed, starts[i])`, so a point's row does not depend on
/// which other starts are requested.
pub fn build_stack_rows(
    metric: &dyn MetricSource,
    targets: &DMatrix<f64>,
    starts: &[usize],
    cfg: &SimConfig,
    spec: &NeighborhoodSpec,
) -> Result<HeatKernelStack> {
    cfg.validate()?;
    NeighborhoodSpec::new(spec.omega, spec.volume_mode)?;
    check_inside(metric, targets, "target")?;
    if let Some(&bad) = starts.iter().find(|&&s| s >= targets.nrows()) {
        return Err(Error::param(format!("start index {bad} out of range")));
    }
    let nt = targets.nrows();
    let volumes = (0..nt)
        .map(|j| neighborhood_volume(metric, &row_vec(targets, j), spec))
        .collect::<Result<Vec<_>>>()?;
    let index = TargetIndex::new(targets);
    let mut sigma = vec![DMatrix::zeros(starts.len(), nt); cfg.n_steps];
    let mut stats = SimStats::default();
    for (i, &s) in starts.iter().enumerate() {
        let row_cfg = SimConfig { seed: exec::derive_seed(cfg.seed, s as u64), ..*cfg };
        let (counts, st) = count_hits(metric, &row_vec(targets, s), &index, spec.omega, &row_cfg, None)?;
        stats.merge(&st);
        for (k, m) in sigma.iter_mut().enumerate() {
            for j in 0..nt {
                m[(i, j)] = counts[k * nt + j] as f64 / cfg.n_paths as f64 / volumes[j];
            }
        }
    }
    log::debug!("stack: {} rows, rejection fraction {:.3}", starts.len(), stats.rejection_fraction());
    Ok(HeatKernelStack {
        dt: cfg.dt,
        times: (1..=cfg.n_steps).map(|k| cfg.time(k)).collect(),
        sigma,
        starts: starts.to_vec(),
        volumes,
        n_paths: cfg.n_paths,
        omega: spec.omega,
        seed: cfg.seed,
        mode: spec.volume_mode,
        stats,
    })
}

/// Square stack with one row per latent point.
pub fn build_stack(
    metric: &dyn MetricSource,
    latents: &DMatrix<f64>,
    cfg: &SimConfig,
    spec: &NeighborhoodSpec,
) -> Result<HeatKernelStack> {
    let starts: Vec<usize> = (0..latents.nrows()).collect();
    build_stack_rows(metric, latents, &starts, cfg, spec)
}

/// Densities from one start to many targets at a single time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatProfile {
    pub densities: Vec<f64>,
    pub stderr: Vec<f64>,
    pub counts: Vec<u64>,
    pub volumes: Vec<f64>,
    pub n_paths: usize,
    pub stats: SimStats,
}

/// Transition density from `start` to each target at time `t`, which must be
/// a whole number of steps `t = k·cfg.dt` with `k ≤ cfg.n_steps`.
pub fn heat_kernel_profile(
    metric: &dyn MetricSource,
    start: &[f64],
    targets: &DMatrix<f64>,
    t: f64,
    cfg: &SimConfig,
    spec: &NeighborhoodSpec,
) -> Result<HeatProfile> {
    cfg.validate()?;
    NeighborhoodSpec::new(spec.omega, spec.volume_mode)?;
    let k = time_steps(t, cfg.dt, cfg.n_steps)?;
    check_inside(metric, targets, "target")?;
    let sm = DMatrix::from_row_slice(1, start.len(), start);
    check_inside(metric, &sm, "start")?;
    let volumes = (0..targets.nrows())
        .map(|j| neighborhood_volume(metric, &row_vec(targets, j), spec))
        .collect::<Result<Vec<_>>>()?;
    let index = TargetIndex::new(targets);
    let run_cfg = SimConfig { n_steps: k, ..*cfg };
    let (counts, stats) = count_hits(metric, start, &index, spec.omega, &run_cfg, Some(k))?;
    let n = cfg.n_paths as f64;
    let densities = counts.iter().zip(&volumes).map(|(c, v)| *c as f64 / n / v).collect();
    let stderr = counts
        .iter()
        .zip(&volumes)
        .map(|(c, v)| {
            let p = *c as f64 / n;
            (p * (1.0 - p) / n).sqrt() / v
        })
        .collect();
    Ok(HeatProfile { densities, stderr, counts, volumes, n_paths: cfg.n_paths, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{euclidean_heat_kernel, AnalyticManifold};
    use crate::bm::simulate;

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-15);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((unit_ball_volume(4) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-14);
    }

    fn three_path_ensemble() -> TrajectoryEnsemble {
        TrajectoryEnsemble {
            start: vec![0.0, 0.0],
            dt: 1.0,
            seed: 0,
            n_paths: 3,
            n_steps: 1,
            positions: vec![0.05, 0.0, 1.0, 1.0, -2.0, 0.5],
            stats: SimStats::default(),
        }
    }

    #[test]
    fn counting_examples() {
        let ens = three_path_ensemble();
        assert!((transition_probability(&ens, &[0.0, 0.0], 0.1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(transition_probability(&ens, &[0.0, 0.0], 1e9, 1).unwrap(), 1.0);
        assert_eq!(transition_probability(&ens, &[0.3, 0.3], 1e-12, 1).unwrap(), 0.0);
        assert!(transition_probability(&ens, &[0.0, 0.0], 0.1, 0).is_err());
        assert!(transition_probability(&ens, &[0.0, 0.0], 0.1, 2).is_err());
        let m = AnalyticManifold::euclidean(2);
        let spec = NeighborhoodSpec::new(0.01, VolumeMode::Euclidean).unwrap();
        assert_eq!(density_estimate(&ens, &[5.0, 5.0], &spec, 1, &m).unwrap(), 0.0);
    }

    #[test]
    fn volume_modes_differ_by_magnification() {
        let m = AnalyticManifold::swiss_roll();
        let x = [4.0, 2.0];
        let e = neighborhood_volume(&m, &x, &NeighborhoodSpec::new(0.2, VolumeMode::Euclidean).unwrap()).unwrap();
        let r = neighborhood_volume(&m, &x, &NeighborhoodSpec::new(0.2, VolumeMode::Riemannian).unwrap()).unwrap();
        assert!((r / e - 17f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn flat_density_matches_heat_kernel() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.25, n_steps: 4, n_paths: 100_000, seed: 5, max_rejects: 10 };
        let ens = simulate(&m, &[0.0, 0.0], &cfg).unwrap();
        let spec = NeighborhoodSpec::new(0.1, VolumeMode::Riemannian).unwrap();
        let d = density_estimate(&ens, &[0.0, 0.0], &spec, 4, &m).unwrap();
        let expect = euclidean_heat_kernel(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        let v = unit_ball_volume(2) * 0.01;
        let p = expect * v;
        let se = (p * (1.0 - p) / 1e5).sqrt() / v;
        // the ball average of the Gaussian sits slightly below its peak
        assert!((d - expect).abs() < 3.0 * se + 0.01 * expect, "{d} vs {expect} ± {se}");
    }

    #[test]
    fn single_point_stack_matches_density_estimate() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.1, n_steps: 3, n_paths: 500, seed: 2, max_rejects: 10 };
        let spec = NeighborhoodSpec::new(0.3, VolumeMode::Riemannian).unwrap();
        let pts = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let stack = build_stack(&m, &pts, &cfg, &spec).unwrap();
        let row_cfg = SimConfig { seed: exec::derive_seed(2, 0), ..cfg };
        let ens = simulate(&m, &[0.2, 0.4], &row_cfg).unwrap();
        for k in 1..=3 {
            let d = density_estimate(&ens, &[0.2, 0.4], &spec, k, &m).unwrap();
            assert_eq!(stack.sigma[k - 1][(0, 0)], d);
        }
    }

    #[test]
    fn collinear_points_decrease_with_distance() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.05, n_steps: 6, n_paths: 20_000, seed: 8, max_rejects: 10 };
        let spec = NeighborhoodSpec::new(0.1, VolumeMode::Riemannian).unwrap();
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.3, 0.0, 0.6, 0.0]);
        let stack = build_stack(&m, &pts, &cfg, &spec).unwrap();
        for s in &stack.sigma {
            assert!(s[(0, 0)] > s[(0, 1)] && s[(0, 1)] > s[(0, 2)]);
            assert!(s[(2, 2)] > s[(2, 1)] && s[(2, 1)] > s[(2, 0)]);
            assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let a = build_stack(&m, &pts, &cfg, &spec).unwrap();
        assert_eq!(a, stack);
        let b = exec::sequential(|| build_stack(&m, &pts, &cfg, &spec).unwrap());
        assert_eq!(b, stack);
    }

    #[test]
    fn rows_do_not_depend_on_other_starts() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.1, n_steps: 2, n_paths: 300, seed: 1, max_rejects: 10 };
        let spec = NeighborhoodSpec::new(0.2, VolumeMode::Euclidean).unwrap();
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.2, 0.0, 0.4, 0.1]);
        let full = build_stack(&m, &pts, &cfg, &spec).unwrap();
        let part = build_stack_rows(&m, &pts, &[2], &cfg, &spec).unwrap();
        assert_eq!(part.sigma[1].row(0), full.sigma[1].row(2));
        let block = full.start_block(1, &[0, 2]);
        assert_eq!(block[(0, 1)], block[(1, 0)]);
    }

    #[test]
    fn profile_time_must_be_on_grid() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.5, n_steps: 4, n_paths: 10, seed: 1, max_rejects: 10 };
        let spec = NeighborhoodSpec::new(0.2, VolumeMode::Euclidean).unwrap();
        let t = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(heat_kernel_profile(&m, &[0.0, 0.0], &t, 0.75, &cfg, &spec).is_err());
        assert!(heat_kernel_profile(&m, &[0.0, 0.0], &t, 2.5, &cfg, &spec).is_err());
        assert!(heat_kernel_profile(&m, &[0.0, 0.0], &t, 1.5, &cfg, &spec).is_ok());
    }

    #[test]
    fn stack_round_trips_through_directory() {
        let m = AnalyticManifold::euclidean(2);
        let cfg = SimConfig { dt: 0.1, n_steps: 3, n_paths: 50, seed: 1, max_rejects: 10 };
        let spec = NeighborhoodSpec::new(0.2, VolumeMode::Riemannian).unwrap();
        let pts = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.1, 0.1]);
        let stack = build_stack(&m, &pts, &cfg, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        stack.save(dir.path()).unwrap();
        assert_eq!(HeatKernelStack::load(dir.path()).unwrap(), stack);
    }
}

//! End-to-end experiment configuration and the stages that connect the
//! modules: dataset, latent model, heat-kernel stack, GP fits, baselines,
//! benchmark and heat-kernel profile.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{swiss_roll_embed, AnalyticManifold, SWISS_WIDTH_RANGE};
use crate::baselines::{default_epsilon, gl_affinity, gl_spectrum};
use crate::bm::{LearnedMetric, MetricSource, SimConfig};
use crate::data::{generate_swiss_roll, swiss_roll_grid, Dataset, SwissRollSpec};
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::gpr::{fit_euclidean_gp, fit_heat_gp, predict_euclidean, predict_heat, EuclideanGpSpec, HeatFitSummary, HeatGpSpec};
use crate::heat::{build_stack_rows, heat_kernel_profile, unit_ball_volume, HeatKernelStack, NeighborhoodSpec, VolumeMode};
use crate::linalg::{median, nearest_neighbor_distances, row_vec};
use crate::lvm::{calibrate_boundary, default_delta, train_bgplvm, train_gplvm, InitMethod, InitSpec, LatentModel, ModelKind};
use crate::optim::OptimizerSpec;

/// Stream tags for per-stage seeds derived from the root seed.
pub mod stage {
    pub const DATA: u64 = 1;
    pub const LVM: u64 = 2;
    pub const BOUNDARY: u64 = 3;
    pub const BM: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PROFILE_ANALYTIC: u64 = 6;
    pub const PROFILE_LEARNED: u64 = 7;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    SwissRoll(SwissRollSpec),
    /// Directory with `labeled.csv`, `unlabeled.csv` and optionally `truth.csv`.
    Csv { dir: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::SwissRoll(SwissRollSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvmConfig {
    pub kind: ModelKind,
    pub q: usize,
    /// Inducing inputs for the Bayesian model.
    pub m: usize,
    pub init: InitMethod,
    pub ard: bool,
    pub optimizer: OptimizerSpec,
    /// Bound the chart by a level set of the mapping variance.
    pub boundary: bool,
    /// Perturbation radius for the level set; default is the largest
    /// nearest-neighbour latent distance.
    pub boundary_delta: Option<f64>,
    pub boundary_dirs: usize,
}

impl Default for LvmConfig {
    fn default() -> Self {
        LvmConfig {
            kind: ModelKind::Bgplvm,
            q: 2,
            m: 30,
            init: InitMethod::Isomap { neighbors: 6 },
            ard: true,
            optimizer: OptimizerSpec::default().with_max_iters(1000),
            boundary: true,
            boundary_delta: None,
            boundary_dirs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub max_rejects: usize,
}

impl Default for BmConfig {
    fn default() -> Self {
        let d = SimConfig::default();
        BmConfig { dt: d.dt, n_steps: d.n_steps, n_paths: d.n_paths, max_rejects: d.max_rejects }
    }
}

impl BmConfig {
    pub fn sim(&self, seed: u64) -> SimConfig {
        SimConfig { dt: self.dt, n_steps: self.n_steps, n_paths: self.n_paths, seed, max_rejects: self.max_rejects }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatConfig {
    /// Absolute latent ball radius; overrides `omega_fraction`.
    pub omega: Option<f64>,
    /// Radius as a multiple of the median nearest-neighbour latent distance.
    pub omega_fraction: f64,
    pub volume_mode: VolumeMode,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig { omega: None, omega_fraction: crate::heat::DEFAULT_OMEGA_FRACTION, volume_mode: VolumeMode::Riemannian }
    }
}

impl HeatConfig {
    pub fn spec(&self, latents: &DMatrix<f64>) -> Result<NeighborhoodSpec> {
        let omega = match self.omega {
            Some(w) => w,
            None => self.omega_fraction * median(&nearest_neighbor_distances(latents)),
        };
        NeighborhoodSpec::new(omega, self.volume_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub optimizer: OptimizerSpec,
    /// Noise floor of the heat-kernel GPs relative to the mean squared response.
    pub min_noise_ratio: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { optimizer: OptimizerSpec::default().with_max_iters(500), min_noise_ratio: crate::gpr::DEFAULT_MIN_NOISE_RATIO }
    }
}

impl GpConfig {
    pub fn heat(&self) -> HeatGpSpec {
        HeatGpSpec { optimizer: self.optimizer, min_noise_ratio: self.min_noise_ratio }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub gl: bool,
    /// Graph bandwidth; default a third of the median pairwise distance.
    pub gl_epsilon: Option<f64>,
    pub gl_k: usize,
    /// Intrinsic dimension for eigenvector normalization; default `lvm.q`.
    pub gl_d: Option<usize>,
    pub gl_n_times: usize,
    /// RBF GP on the ambient coordinates.
    pub euclidean_ambient: bool,
    /// RBF GP on the latent means.
    pub euclidean_latent: bool,
    pub euclidean_ard: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            gl: true,
            gl_epsilon: None,
            gl_k: 50,
            gl_d: None,
            gl_n_times: 40,
            euclidean_ambient: true,
            euclidean_latent: true,
            euclidean_ard: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub repetitions: usize,
    /// Labeled points drawn for each repetition.
    pub n_train: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { repetitions: 5, n_train: 23 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Start point `(r, z)` on the Swiss roll.
    pub start: [f64; 2],
    pub n_targets: usize,
    /// Radius spacing of the targets, centred on the start.
    pub spacing: f64,
    pub t: f64,
    pub dt: f64,
    pub n_paths_analytic: usize,
    pub n_paths_learned: usize,
    /// Grid points the learned model is trained on.
    pub v_grid: usize,
    /// Ball radius in the analytic `(r, z)` chart. The learned chart uses the
    /// radius whose ball has the same Riemannian volume at the start.
    pub omega: f64,
    pub learned: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            start: [6.0, 3.0],
            n_targets: 29,
            spacing: 0.2,
            t: 50.0,
            dt: 0.5,
            n_paths_analytic: 20000,
            n_paths_learned: 5000,
            v_grid: 250,
            omega: 0.25,
            learned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub lvm: LvmConfig,
    pub bm: BmConfig,
    pub heat: HeatConfig,
    pub gp: GpConfig,
    pub baselines: BaselineConfig,
    pub benchmark: BenchmarkConfig,
    pub profile: ProfileConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output: PathBuf::from("gpum-out"),
            dataset: DatasetConfig::default(),
            lvm: LvmConfig::default(),
            bm: BmConfig::default(),
            heat: HeatConfig { omega_fraction: 4.0, ..HeatConfig::default() },
            gp: GpConfig::default(),
            baselines: BaselineConfig::default(),
            benchmark: BenchmarkConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML; flat `section.key = value` lines are TOML dotted keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::param(format!("config: {e}")))?;
        Self::from_table(table)
    }

    /// A `dataset` section without `kind` means the Swiss roll.
    pub fn from_table(mut table: toml::Table) -> Result<Self> {
        if let Some(toml::Value::Table(d)) = table.get_mut("dataset") {
            d.entry("kind").or_insert_with(|| toml::Value::String("swiss_roll".into()));
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::param(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        self.validate()?;
        toml::to_string(self).map_err(|e| Error::param(format!("config: {e}")))
    }

    pub fn seed_for(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are i64; larger seeds could not be read back.
        if self.seed > i64::MAX as u64 {
            return Err(Error::param(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if self.lvm.q == 0 {
            return Err(Error::param("lvm.q must be positive"));
        }
        self.bm.sim(0).validate()?;
        if self.benchmark.repetitions == 0 || self.benchmark.n_train == 0 {
            return Err(Error::param("benchmark needs at least one repetition and one training point"));
        }
        if let DatasetConfig::SwissRoll(s) = &self.dataset {
            if self.benchmark.n_train > s.n_labeled {
                return Err(Error::param(format!(
                    "benchmark.n_train = {} exceeds dataset.n_labeled = {}",
                    self.benchmark.n_train, s.n_labeled
                )));
            }
        }
        if self.profile.n_targets == 0 || !(self.profile.t > 0.0) || !(self.profile.dt > 0.0) {
            return Err(Error::param("profile needs targets and positive t, dt"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output.join("data")
    }
}

/// Generate (Swiss roll) or read (CSV) the dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::SwissRoll(s) => generate_swiss_roll(&SwissRollSpec { seed: cfg.seed_for(stage::DATA), ..*s }),
        DatasetConfig::Csv { dir } => Dataset::read(dir),
    }
}

pub fn train_latent(cfg: &LvmConfig, points: &DMatrix<f64>, seed: u64) -> Result<LatentModel> {
    let init = InitSpec { method: cfg.init, seed, ard: cfg.ard, ..InitSpec::default() };
    match cfg.kind {
        ModelKind::Bgplvm => train_bgplvm(points, cfg.q, cfg.m.min(points.nrows()), &init, &cfg.optimizer),
        ModelKind::Gplvm => train_gplvm(points, cfg.q, &init, &cfg.optimizer),
    }
}

/// Expected metric of `model` with the calibrated variance boundary.
pub fn learned_metric(cfg: &LvmConfig, model: &LatentModel, seed: u64) -> Result<LearnedMetric> {
    let field = model.metric_field()?;
    let boundary = if cfg.boundary {
        let delta = cfg.boundary_delta.unwrap_or_else(|| default_delta(&field));
        Some(calibrate_boundary(&field, delta, cfg.boundary_dirs, seed)?)
    } else {
        None
    };
    Ok(LearnedMetric { field, boundary })
}

/// Heat-kernel rows from the labeled points (the first `n_labeled` latents)
/// to every latent point.
pub fn build_labeled_stack(cfg: &ExperimentConfig, metric: &LearnedMetric, n_labeled: usize) -> Result<HeatKernelStack> {
    let latents = &metric.field.latents;
    let spec = cfg.heat.spec(latents)?;
    let starts: Vec<usize> = (0..n_labeled).collect();
    build_stack_rows(metric, latents, &starts, &cfg.bm.sim(cfg.seed_for(stage::BM)), &spec)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt()
}

/// Sorted random subset of `0..n` of size `k` for repetition `rep`.
pub fn label_subset(cfg: &ExperimentConfig, n: usize, rep: usize) -> Result<Vec<usize>> {
    let k = cfg.benchmark.n_train;
    if k > n {
        return Err(Error::param(format!("cannot draw {k} training points from {n} labeled")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed_for(stage::SPLIT), rep as u64));
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub const METHOD_GPUM: &str = "gpum";
pub const METHOD_AMBIENT: &str = "euclidean_ambient";
pub const METHOD_LATENT: &str = "euclidean_latent";
pub const METHOD_GL: &str = "graph_laplacian";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub method: String,
    pub rmse: f64,
    /// Selected diffusion time for kernel-stack methods.
    pub selected_t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub rmse: Vec<f64>,
}

/// Everything deterministic about a benchmark; wall-clock times are kept
/// apart in [`StageTimes`] so reruns compare bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_train: usize,
    pub repetitions: usize,
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
    pub gpum_fits: Vec<HeatFitSummary>,
    pub model_objective: f64,
    pub rejection_fraction: f64,
}

impl BenchmarkReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(["repetition", "method", "rmse", "selected_t"])?;
        for r in &self.runs {
            w.write_record([
                r.repetition.to_string(),
                r.method.clone(),
                format!("{:e}", r.rmse),
                r.selected_t.map_or(String::new(), |t| format!("{t:e}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub stages: Vec<(String, f64)>,
}

impl StageTimes {
    fn record<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| stage_error(name, e))?;
        self.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        log::info!("stage {name}: {:.2}s", t.elapsed().as_secs_f64());
        Ok(out)
    }
}

/// Prefix an error message with the stage it came from, keeping its kind.
pub fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{stage}: {m}")),
        Error::Param(m) => Error::Param(format!("{stage}: {m}")),
        Error::Data(m) => Error::Data(format!("{stage}: {m}")),
        Error::LinAlg(m) => Error::LinAlg(format!("{stage}: {m}")),
        other => other,
    }
}

fn summarize(name: &str, runs: &[RunRecord]) -> MethodSummary {
    let rmse: Vec<f64> = runs.iter().filter(|r| r.method == name).map(|r| r.rmse).collect();
    let n = rmse.len().max(1) as f64;
    let mean = rmse.iter().sum::<f64>() / n;
    // Sample standard deviation; zero for a single repetition.
    let std = if rmse.len() > 1 { (rmse.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    MethodSummary { method: name.to_string(), mean_rmse: mean, std_rmse: std, rmse }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Train on all points, build the heat stack from the labeled rows, and
/// score every method on the unlabeled points over random label subsets.
pub fn run_benchmark(cfg: &ExperimentConfig, data: &Dataset) -> Result<(BenchmarkReport, StageTimes)> {
    cfg.validate()?;
    let truth = data.truth.as_ref().ok_or_else(|| Error::data("benchmark needs truth.csv for the unlabeled points"))?;
    let n = data.n_labeled();
    let v = data.unlabeled.nrows();
    let points = data.all_points();
    let mut times = StageTimes::default();

    let model = times.record("train-lvm", || train_latent(&cfg.lvm, &points, cfg.seed_for(stage::LVM)))?;
    let metric = times.record("boundary", || learned_metric(&cfg.lvm, &model, cfg.seed_for(stage::BOUNDARY)))?;
    let stack = times.record("build-kernel", || build_labeled_stack(cfg, &metric, n))?;
    let gl = if cfg.baselines.gl {
        Some(times.record("graph-laplacian", || {
            let eps = cfg.baselines.gl_epsilon.unwrap_or_else(|| default_epsilon(&points));
            let k = cfg.baselines.gl_k.min(points.nrows());
            let (w, d) = gl_affinity(&points, eps)?;
            let sp = gl_spectrum(&points, &w, &d, eps, k, cfg.baselines.gl_d.unwrap_or(cfg.lvm.q))?;
            sp.stack(&sp.time_grid(cfg.baselines.gl_n_times)?, eps)
        })?)
    } else {
        None
    };

    let test: Vec<usize> = (n..n + v).collect();
    let latents = &model.latent.means;
    let euclid = EuclideanGpSpec { ard: cfg.baselines.euclidean_ard, optimizer: cfg.gp.optimizer };
    let mut runs = Vec::new();
    let mut fits = Vec::new();
    times.record("fit-predict", || {
        for rep in 0..cfg.benchmark.repetitions {
            let rows = label_subset(cfg, n, rep)?;
            let y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();

            let (fit, summary) = fit_heat_gp(&stack, &rows, &y, &cfg.gp.heat())?;
            let p = predict_heat(&fit, &stack, &test)?;
            runs.push(RunRecord { repetition: rep, method: METHOD_GPUM.into(), rmse: rmse(&p.mean, truth), selected_t: Some(summary.selected_t) });
            fits.push(summary);

            if cfg.baselines.euclidean_ambient {
                let fit = fit_euclidean_gp(&select_rows(&data.labeled, &rows), &y, &euclid)?;
                let p = predict_euclidean(&fit, &data.unlabeled)?;
                runs.push(RunRecord { repetition: rep, method: METHOD_AMBIENT.into(), rmse: rmse(&p.mean, truth), selected_t: None });
            }
            if cfg.baselines.euclidean_latent {
                let fit = fit_euclidean_gp(&select_rows(latents, &rows), &y, &euclid)?;
                let p = predict_euclidean(&fit, &select_rows(latents, &test))?;
                runs.push(RunRecord { repetition: rep, method: METHOD_LATENT.into(), rmse: rmse(&p.mean, truth), selected_t: None });
            }
            if let Some(gl) = &gl {
                let (fit, s) = fit_heat_gp(gl, &rows, &y, &cfg.gp.heat())?;
                let p = predict_heat(&fit, gl, &test)?;
                runs.push(RunRecord { repetition: rep, method: METHOD_GL.into(), rmse: rmse(&p.mean, truth), selected_t: Some(s.selected_t) });
            }
        }
        Ok(())
    })?;
    let mut names = vec![METHOD_GPUM];
    if cfg.baselines.euclidean_ambient {
        names.push(METHOD_AMBIENT);
    }
    if cfg.baselines.euclidean_latent {
        names.push(METHOD_LATENT);
    }
    if cfg.baselines.gl {
        names.push(METHOD_GL);
    }
    let report = BenchmarkReport {
        n_labeled: n,
        n_unlabeled: v,
        n_train: cfg.benchmark.n_train,
        repetitions: cfg.benchmark.repetitions,
        methods: names.iter().map(|m| summarize(m, &runs)).collect(),
        runs,
        gpum_fits: fits,
        model_objective: model.report.objective,
        rejection_fraction: stack.stats.rejection_fraction(),
    };
    Ok((report, times))
}

/// Analytic and learned Swiss-roll heat-kernel densities at targets along
/// the radius through the start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub target_radius: Vec<f64>,
    pub density_analytic: Vec<f64>,
    pub stderr_analytic: Vec<f64>,
    pub density_learned: Option<Vec<f64>>,
    pub stderr_learned: Option<Vec<f64>>,
    pub omega_learned: Option<f64>,
}

impl ProfileTable {
    /// Standard error of the analytic estimate, combined with the learned
    /// one when present.
    pub fn mc_stderr(&self) -> Vec<f64> {
        match &self.stderr_learned {
            Some(l) => self.stderr_analytic.iter().zip(l).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
            None => self.stderr_analytic.clone(),
        }
    }

    /// Targets where the learned density is within `k` combined standard
    /// errors of the analytic one.
    pub fn agreement(&self, k: f64) -> Option<usize> {
        let l = self.density_learned.as_ref()?;
        let se = self.mc_stderr();
        Some((0..l.len()).filter(|&i| (l[i] - self.density_analytic[i]).abs() <= k * se[i]).count())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["target_radius", "density_analytic", "density_learned", "mc_stderr", "stderr_analytic", "stderr_learned"])?;
        let se = self.mc_stderr();
        let opt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or(String::new(), |v| format!("{:e}", v[i]));
        for i in 0..self.target_radius.len() {
            w.write_record([
                format!("{:e}", self.target_radius[i]),
                format!("{:e}", self.density_analytic[i]),
                opt(&self.density_learned, i),
                format!("{:e}", se[i]),
                format!("{:e}", self.stderr_analytic[i]),
                opt(&self.stderr_learned, i),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training set of the learned profile: grid points embedded in `R³`.
pub fn profile_training_points(v: usize) -> Result<DMatrix<f64>> {
    let grid = swiss_roll_grid(v);
    let mut s = DMatrix::zeros(v, 3);
    for i in 0..v {
        let e = swiss_roll_embed(grid[(i, 0)], grid[(i, 1)])?;
        for j in 0..3 {
            s[(i, j)] = e[j];
        }
    }
    Ok(s)
}

pub fn profile_radii(p: &ProfileConfig) -> Vec<f64> {
    let c = (p.n_targets as f64 - 1.0) / 2.0;
    (0..p.n_targets).map(|k| p.start[0] + p.spacing * (k as f64 - c)).collect()
}

/// Heat-kernel profile at time `t` from the analytic chart and, unless
/// disabled, from a latent model trained on grid points (or `model` when
/// given).
pub fn run_profile(cfg: &ExperimentConfig, model: Option<&LatentModel>) -> Result<ProfileTable> {
    let p = &cfg.profile;
    let radii = profile_radii(p);
    let z = p.start[1];
    if !(SWISS_WIDTH_RANGE.0..=SWISS_WIDTH_RANGE.1).contains(&z) {
        return Err(Error::domain(format!("profile start width {z} outside the roll")));
    }
    let steps = (p.t / p.dt).round() as usize;
    let sim = |n_paths: usize, seed: u64| SimConfig { dt: p.dt, n_steps: steps, n_paths, seed, max_rejects: cfg.bm.max_rejects };
    let an = AnalyticManifold::swiss_roll();
    let ta = DMatrix::from_fn(radii.len(), 2, |k, j| if j == 0 { radii[k] } else { z });
    let spec_a = NeighborhoodSpec::new(p.omega, VolumeMode::Riemannian)?;
    let pa = heat_kernel_profile(&an, &p.start, &ta, p.t, &sim(p.n_paths_analytic, cfg.seed_for(stage::PROFILE_ANALYTIC)), &spec_a)
        .map_err(|e| stage_error("profile-analytic", e))?;
    let mut table = ProfileTable {
        target_radius: radii.clone(),
        density_analytic: pa.densities,
        stderr_analytic: pa.stderr,
        density_learned: None,
        stderr_learned: None,
        omega_learned: None,
    };
    if !p.learned {
        return Ok(table);
    }
    let trained;
    let model = match model {
        Some(m) => m,
        None => {
            trained = train_latent(&cfg.lvm, &profile_training_points(p.v_grid)?, cfg.seed_for(stage::LVM))
                .map_err(|e| stage_error("train-lvm", e))?;
            &trained
        }
    };
    if model.ambient_dim() != 3 {
        return Err(Error::shape("profile needs a model of a point cloud in R³"));
    }
    let metric = learned_metric(&cfg.lvm, model, cfg.seed_for(stage::BOUNDARY))?;
    let locate = |r: f64| -> Result<Vec<f64>> { metric.field.locate(&swiss_roll_embed(r, z)?, None) };
    let x0 = locate(p.start[0])?;
    let mut tl = DMatrix::zeros(radii.len(), model.latent_dim());
    for (k, &r) in radii.iter().enumerate() {
        tl.set_row(k, &nalgebra::RowDVector::from_vec(locate(r)?));
    }
    let q = model.latent_dim();
    let va = unit_ball_volume(2) * p.omega * p.omega * an.volume_density(&p.start)?;
    let omega_l = (va / (unit_ball_volume(q) * metric.volume_density(&x0)?)).powf(1.0 / q as f64);
    let spec_l = NeighborhoodSpec::new(omega_l, VolumeMode::Riemannian)?;
    let pl = heat_kernel_profile(&metric, &x0, &tl, p.t, &sim(p.n_paths_learned, cfg.seed_for(stage::PROFILE_LEARNED)), &spec_l)
        .map_err(|e| stage_error("profile-learned", e))?;
    table.density_learned = Some(pl.densities);
    table.stderr_learned = Some(pl.stderr);
    table.omega_learned = Some(omega_l);
    Ok(table)
}

/// Latent coordinates of every training point as a matrix with named columns.
pub fn latent_header(q: usize) -> Vec<String> {
    (1..=q).map(|j| format!("x{j}")).collect()
}

pub fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    row_vec(m, i)
}

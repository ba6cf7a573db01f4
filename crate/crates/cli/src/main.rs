use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gpum::csvio::write_matrix;
use gpum::data::Dataset;
use gpum::experiment::{self as exp, stage, DatasetConfig, ExperimentConfig};
use gpum::gpr::{self, HeatFitSummary};
use gpum::heat::HeatKernelStack;
use gpum::lvm::{BoundarySpec, LatentModel};
use gpum::manifest::Manifest;

#[derive(Parser)]
#[command(name = "gpum", version, about = "Gaussian processes on point clouds with heat kernels of learned manifolds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; flat `section.key = value` lines work too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic Swiss-roll dataset.
    GenSwiss,
    /// Train the latent model on labeled and unlabeled points.
    TrainLvm,
    /// Simulate BM paths on the learned manifold from one data point.
    Simulate {
        /// Index of the start among labeled-then-unlabeled points.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Heat-kernel stack from every labeled point to every point.
    BuildKernel,
    /// Fit the heat-kernel GP on the labeled points.
    Fit {
        /// Comma-separated subset of labeled rows; default all.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
    },
    /// Predict at the unlabeled points from a previous fit.
    Predict,
    /// Analytic and learned Swiss-roll heat-kernel profiles.
    Profile {
        /// Skip the learned profile.
        #[arg(long)]
        analytic_only: bool,
    },
    /// Compare GPUM with the Euclidean and graph-Laplacian baselines.
    Benchmark,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSwiss => "gen-swiss",
            Command::TrainLvm => "train-lvm",
            Command::Simulate { .. } => "simulate",
            Command::BuildKernel => "build-kernel",
            Command::Fit { .. } => "fit",
            Command::Predict => "predict",
            Command::Profile { .. } => "profile",
            Command::Benchmark => "benchmark",
        }
    }
}

enum CliError {
    Config(String),
    Core(gpum::Error),
}

impl From<gpum::Error> for CliError {
    fn from(e: gpum::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use gpum::Error::*;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Param(_) | Shape(_) | Data(_)) => 2,
            CliError::Core(LinAlg(_) | Domain(_)) => 3,
            CliError::Core(Io(_) | Json(_) | Csv(_)) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config error: {m}"),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, value) =
        assignment.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn resolve_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut table = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Core(e.into()))?;
            text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &c.sets {
        apply_set(&mut table, s)?;
    }
    let mut cfg = ExperimentConfig::from_table(table).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct FitFile {
    rows: Vec<usize>,
    summary: HeatFitSummary,
}

#[derive(Serialize)]
struct PredictSummary {
    n_predicted: usize,
    rmse: Option<f64>,
    clamped_variances: usize,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    stage: &'static str,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, p: &Path) -> CliResult<()> {
        if !p.exists() {
            return Err(CliError::Core(gpum::Error::Data(format!("{} is missing; run the stage that writes it first", p.display()))));
        }
        Ok(self.manifest.check(p)?)
    }

    fn output(&mut self, p: &Path) -> CliResult<()> {
        self.manifest.record(self.stage, p)?;
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        match &self.cfg.dataset {
            DatasetConfig::Csv { dir } => dir.clone(),
            DatasetConfig::SwissRoll(_) => self.cfg.data_dir(),
        }
    }

    fn dataset(&self) -> CliResult<Dataset> {
        let dir = self.data_dir();
        for f in ["labeled.csv", "unlabeled.csv"] {
            self.input(&dir.join(f))?;
        }
        Ok(Dataset::read(&dir)?)
    }

    fn model(&self, data: &Dataset) -> CliResult<LatentModel> {
        let p = self.path("model.json");
        self.input(&p)?;
        Ok(LatentModel::load(&p, data.all_points())?)
    }

    fn metric(&self, model: &LatentModel) -> CliResult<gpum::bm::LearnedMetric> {
        let p = self.path("boundary.json");
        let boundary = if p.exists() {
            self.input(&p)?;
            let b: Option<BoundarySpec> = serde_json::from_str(&std::fs::read_to_string(&p).map_err(gpum::Error::from)?)
                .map_err(gpum::Error::from)?;
            b
        } else {
            None
        };
        Ok(gpum::bm::LearnedMetric { field: model.metric_field()?, boundary })
    }

    fn stack(&self) -> CliResult<HeatKernelStack> {
        let p = self.path("stack");
        self.input(&p)?;
        Ok(HeatKernelStack::load(&p)?)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(v).map_err(gpum::Error::from)?).map_err(gpum::Error::from)?;
        self.output(&p)
    }
}

fn run(cmd: &Command, cfg: ExperimentConfig) -> CliResult<()> {
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(gpum::Error::from)?;
    let manifest = Manifest::open(&out)?;
    let mut ctx = Ctx { cfg, out, manifest, stage: cmd.name() };
    let resolved = ctx.cfg.to_toml()?;
    std::fs::write(ctx.path(&format!("{}.toml", ctx.stage)), resolved).map_err(gpum::Error::from)?;

    match cmd {
        Command::GenSwiss => {
            if !matches!(ctx.cfg.dataset, DatasetConfig::SwissRoll(_)) {
                return Err(CliError::Config("gen-swiss needs dataset.kind = \"swiss_roll\"".into()));
            }
            let data = exp::load_dataset(&ctx.cfg)?;
            let dir = ctx.cfg.data_dir();
            data.write(&dir)?;
            for f in ["labeled.csv", "unlabeled.csv", "truth.csv"] {
                ctx.output(&dir.join(f))?;
            }
            println!("wrote {} labeled and {} unlabeled points to {}", data.n_labeled(), data.unlabeled.nrows(), dir.display());
        }
        Command::TrainLvm => {
            let data = ctx.dataset()?;
            let model = exp::train_latent(&ctx.cfg.lvm, &data.all_points(), ctx.cfg.seed_for(stage::LVM))?;
            let metric = exp::learned_metric(&ctx.cfg.lvm, &model, ctx.cfg.seed_for(stage::BOUNDARY))?;
            let p = ctx.path("model.json");
            model.save(&p)?;
            ctx.output(&p)?;
            ctx.write_json("boundary.json", &metric.boundary)?;
            let header = exp::latent_header(model.latent_dim());
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            let p = ctx.path("latents.csv");
            write_matrix(&p, &model.latent.means, Some(&h))?;
            ctx.output(&p)?;
            println!(
                "objective {:.6} after {} iterations ({:?})",
                model.report.objective, model.report.iterations, model.report.termination
            );
        }
        Command::Simulate { start } => {
            let data = ctx.dataset()?;
            let model = ctx.model(&data)?;
            let metric = ctx.metric(&model)?;
            if *start >= model.n_points() {
                return Err(CliError::Config(format!("start {start} outside {} points", model.n_points())));
            }
            let x0 = exp::row(&model.latent.means, *start);
            let ens = gpum::bm::simulate(&metric, &x0, &ctx.cfg.bm.sim(ctx.cfg.seed_for(stage::BM)))?;
            let p = ctx.path("paths.csv");
            ens.write_csv(&p)?;
            ctx.output(&p)?;
            println!("{} paths, rejection fraction {:.4}", ens.n_paths, ens.stats.rejection_fraction());
        }
        Command::BuildKernel => {
            let data = ctx.dataset()?;
            let model = ctx.model(&data)?;
            let metric = ctx.metric(&model)?;
            let stack = exp::build_labeled_stack(&ctx.cfg, &metric, data.n_labeled())?;
            let p = ctx.path("stack");
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(gpum::Error::from)?;
            }
            stack.save(&p)?;
            ctx.output(&p)?;
            println!(
                "{} x {} stack over {} times, omega {:.4}, rejection fraction {:.4}",
                stack.n_starts(),
                stack.n_targets(),
                stack.times.len(),
                stack.omega,
                stack.stats.rejection_fraction()
            );
        }
        Command::Fit { rows } => {
            let data = ctx.dataset()?;
            let stack = ctx.stack()?;
            let rows = rows.clone().unwrap_or_else(|| (0..data.n_labeled()).collect());
            if let Some(&r) = rows.iter().find(|&&r| r >= data.n_labeled()) {
                return Err(CliError::Config(format!("row {r} is not a labeled point")));
            }
            let y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
            let (_, summary) = gpr::fit_heat_gp(&stack, &rows, &y, &ctx.cfg.gp.heat())?;
            println!(
                "t = {} sigma_h2 = {:.4e} noise = {:.4e} log marginal = {:.4}",
                summary.selected_t, summary.sigma_h2, summary.noise_var, summary.log_marginal
            );
            ctx.write_json("fit.json", &FitFile { rows, summary })?;
        }
        Command::Predict => {
            let data = ctx.dataset()?;
            let stack = ctx.stack()?;
            let p = ctx.path("fit.json");
            ctx.input(&p)?;
            let fit: FitFile = serde_json::from_str(&std::fs::read_to_string(&p).map_err(gpum::Error::from)?).map_err(gpum::Error::from)?;
            let y: Vec<f64> = fit.rows.iter().map(|&i| *data.y.get(i).unwrap_or(&f64::NAN)).collect();
            let gp = gpr::condition_heat(&stack, &fit.rows, &y, &fit.summary)?;
            let n = data.n_labeled();
            let targets: Vec<usize> = (n..n + data.unlabeled.nrows()).collect();
            let pred = gpr::predict_heat(&gp, &stack, &targets)?;
            let m = nalgebra::DMatrix::from_fn(targets.len(), 2, |i, j| if j == 0 { pred.mean[i] } else { pred.var[i] });
            let p = ctx.path("predictions.csv");
            write_matrix(&p, &m, Some(&["mean", "var"]))?;
            ctx.output(&p)?;
            let rmse = data.truth.as_ref().map(|t| exp::rmse(&pred.mean, t));
            if let Some(r) = rmse {
                println!("rmse {r:.6}");
            }
            ctx.write_json("predict.json", &PredictSummary { n_predicted: targets.len(), rmse, clamped_variances: pred.clamped })?;
        }
        Command::Profile { analytic_only } => {
            ctx.cfg.profile.learned &= !analytic_only;
            let table = exp::run_profile(&ctx.cfg, None)?;
            let p = ctx.path("profile.csv");
            table.write_csv(&p)?;
            ctx.output(&p)?;
            match table.agreement(2.0) {
                Some(k) => println!("{k}/{} targets within 2 standard errors", table.target_radius.len()),
                None => println!("analytic profile at {} targets", table.target_radius.len()),
            }
        }
        Command::Benchmark => {
            let data = exp::load_dataset(&ctx.cfg)?;
            if matches!(ctx.cfg.dataset, DatasetConfig::SwissRoll(_)) {
                let dir = ctx.cfg.data_dir();
                data.write(&dir)?;
                for f in ["labeled.csv", "unlabeled.csv", "truth.csv"] {
                    ctx.output(&dir.join(f))?;
                }
            }
            let (report, times) = exp::run_benchmark(&ctx.cfg, &data)?;
            report.write(&ctx.out)?;
            ctx.output(&ctx.path("report.json"))?;
            ctx.output(&ctx.path("report.csv"))?;
            std::fs::write(ctx.path("timings.json"), serde_json::to_string_pretty(&times).map_err(gpum::Error::from)?)
                .map_err(gpum::Error::from)?;
            for m in &report.methods {
                println!("{:<20} {:.4} ± {:.4}", m.method, m.mean_rmse, m.std_rmse);
            }
        }
    }
    ctx.manifest.save()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = cli.cmd.name();
    let result = resolve_config(&cli.common).and_then(|cfg| run(&cli.cmd, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpum {stage}: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

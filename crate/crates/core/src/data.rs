//! Regression datasets: the synthetic Swiss roll and user-supplied CSV.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic::{swiss_roll_arc_length, swiss_roll_radius_at_arc, swiss_roll_embed, SWISS_RADIUS_RANGE, SWISS_WIDTH_RANGE};
use crate::csvio::{read_table, write_matrix};
use crate::error::{Error, Result};

/// Regression function on the Swiss roll chart `(r, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueFunction {
    /// `amplitude · sin(2π (s(r) − s(r_min)) / wavelength)` with `s` the arc
    /// length along the spiral: slow at small radius, fast at large radius.
    ArcSine { wavelength: f64, amplitude: f64 },
    /// `amplitude · sin(a r + b r²)`: the radial frequency grows with `r`.
    Chirp { a: f64, b: f64, amplitude: f64 },
    /// `amplitude · sin(freq · r) · cos(π z / width_period)`.
    RadialSine { freq: f64, amplitude: f64, width_period: f64 },
}

impl Default for TrueFunction {
    fn default() -> Self {
        TrueFunction::ArcSine { wavelength: 25.0, amplitude: 1.0 }
    }
}

impl TrueFunction {
    pub fn eval(&self, r: f64, z: f64) -> f64 {
        match *self {
            TrueFunction::ArcSine { wavelength, amplitude } => {
                let s = swiss_roll_arc_length(r) - swiss_roll_arc_length(SWISS_RADIUS_RANGE.0);
                amplitude * (2.0 * PI * s / wavelength).sin()
            }
            TrueFunction::Chirp { a, b, amplitude } => amplitude * (a * r + b * r * r).sin(),
            TrueFunction::RadialSine { freq, amplitude, width_period } => {
                amplitude * (freq * r).sin() * (PI * z / width_period).cos()
            }
        }
    }
}

/// How labeled points are drawn on the roll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSampling {
    /// Uniform in the `(r, z)` box.
    Chart,
    /// Uniform with respect to surface area, i.e. uniform in arc length.
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwissRollSpec {
    pub n_labeled: usize,
    pub v_unlabeled: usize,
    pub noise: f64,
    pub function: TrueFunction,
    pub labels: LabelSampling,
    pub seed: u64,
}

impl Default for SwissRollSpec {
    fn default() -> Self {
        SwissRollSpec { n_labeled: 24, v_unlabeled: 450, noise: 0.05, function: TrueFunction::default(), labels: LabelSampling::Area, seed: 0 }
    }
}

/// Points in `R^p` with responses on the labeled part and, when known, the
/// noise-free function on the unlabeled part.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: DMatrix<f64>,
    pub y: Vec<f64>,
    pub unlabeled: DMatrix<f64>,
    pub truth: Option<Vec<f64>>,
    /// Chart coordinates `(r, z)` of labeled then unlabeled points, for
    /// synthetic data.
    pub chart: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn n_labeled(&self) -> usize {
        self.labeled.nrows()
    }

    /// Labeled rows followed by unlabeled rows.
    pub fn all_points(&self) -> DMatrix<f64> {
        let (n, v, p) = (self.labeled.nrows(), self.unlabeled.nrows(), self.labeled.ncols());
        DMatrix::from_fn(n + v, p, |i, j| if i < n { self.labeled[(i, j)] } else { self.unlabeled[(i - n, j)] })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = self.labeled.ncols();
        let names: Vec<String> = (1..=p).map(|j| format!("s{j}")).collect();
        let mut lab_names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        write_matrix(&dir.join("unlabeled.csv"), &self.unlabeled, Some(&lab_names))?;
        lab_names.push("y");
        let lab = DMatrix::from_fn(self.labeled.nrows(), p + 1, |i, j| if j < p { self.labeled[(i, j)] } else { self.y[i] });
        write_matrix(&dir.join("labeled.csv"), &lab, Some(&lab_names))?;
        if let Some(t) = &self.truth {
            let n = self.labeled.nrows();
            let (m, h): (DMatrix<f64>, Vec<&str>) = match &self.chart {
                Some(c) => (DMatrix::from_fn(t.len(), 3, |i, j| if j < 2 { c[(n + i, j)] } else { t[i] }), vec!["r", "z", "f"]),
                None => (DMatrix::from_column_slice(t.len(), 1, t), vec!["f"]),
            };
            write_matrix(&dir.join("truth.csv"), &m, Some(&h))?;
        }
        Ok(())
    }

    /// Read `labeled.csv` (coordinates then response), `unlabeled.csv` and,
    /// if present, `truth.csv` (column `f`, or the only column).
    pub fn read(dir: &Path) -> Result<Self> {
        let lab = read_table(&dir.join("labeled.csv"))?.values;
        let unl = read_table(&dir.join("unlabeled.csv"))?.values;
        if lab.ncols() < 2 || lab.ncols() - 1 != unl.ncols() {
            return Err(Error::data(format!(
                "labeled.csv has {} columns, unlabeled.csv {}; expected p+1 and p",
                lab.ncols(),
                unl.ncols()
            )));
        }
        let p = unl.ncols();
        let truth_path = dir.join("truth.csv");
        let (truth, chart) = if truth_path.exists() {
            let t = read_table(&truth_path)?;
            let f = match t.column("f") {
                Some(f) => f,
                None if t.values.ncols() == 1 => t.values.column(0).iter().cloned().collect(),
                None => return Err(Error::data("truth.csv needs an `f` column")),
            };
            if f.len() != unl.nrows() {
                return Err(Error::data(format!("truth.csv has {} rows for {} unlabeled points", f.len(), unl.nrows())));
            }
            (Some(f), None)
        } else {
            (None, None)
        };
        let ds = Dataset {
            labeled: lab.columns(0, p).into_owned(),
            y: lab.column(p).iter().cloned().collect(),
            unlabeled: unl,
            truth,
            chart,
        };
        if ds.labeled.iter().chain(ds.unlabeled.iter()).chain(ds.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite values in dataset"));
        }
        Ok(ds)
    }
}

/// Exactly `v` chart points on a regular `(r, z)` grid, uniform in radius so
/// that the outer turns are sampled more sparsely along the spiral.
pub fn swiss_roll_grid(v: usize) -> DMatrix<f64> {
    let (r0, r1) = SWISS_RADIUS_RANGE;
    let (z0, z1) = SWISS_WIDTH_RANGE;
    let span = swiss_roll_arc_length(r1) - swiss_roll_arc_length(r0);
    let nz = ((v as f64 * (z1 - z0) / span).sqrt().round() as usize).clamp(1, v.max(1));
    let nr = v.div_ceil(nz);
    let total = nr * nz;
    let lin = |a: f64, b: f64, k: usize, n: usize| if n == 1 { 0.5 * (a + b) } else { a + (b - a) * k as f64 / (n - 1) as f64 };
    let mut out = DMatrix::zeros(v, 2);
    for i in 0..v {
        // Evenly spaced selection when the grid overshoots.
        let g = if v <= 1 { 0 } else { (i * (total - 1) + (v - 1) / 2) / (v - 1) };
        out[(i, 0)] = lin(r0, r1, g / nz, nr);
        out[(i, 1)] = lin(z0, z1, g % nz, nz);
    }
    out
}

fn embed_rows(chart: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(chart.nrows(), 3);
    for i in 0..chart.nrows() {
        let e = swiss_roll_embed(chart[(i, 0)], chart[(i, 1)])?;
        for j in 0..3 {
            out[(i, j)] = e[j];
        }
    }
    Ok(out)
}

/// Labeled points drawn per [`LabelSampling`] with noisy responses, unlabeled
/// points on [`swiss_roll_grid`] with exact function values.
pub fn generate_swiss_roll(spec: &SwissRollSpec) -> Result<Dataset> {
    if spec.n_labeled == 0 || spec.v_unlabeled == 0 {
        return Err(Error::param("need at least one labeled and one unlabeled point"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::param(format!("noise level must be non-negative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (r0, r1) = SWISS_RADIUS_RANGE;
    let (z0, z1) = SWISS_WIDTH_RANGE;
    let (s0, s1) = (swiss_roll_arc_length(r0), swiss_roll_arc_length(r1));
    let n = spec.n_labeled;
    let grid = swiss_roll_grid(spec.v_unlabeled);
    let mut chart = DMatrix::zeros(n + spec.v_unlabeled, 2);
    for i in 0..n {
        chart[(i, 0)] = match spec.labels {
            LabelSampling::Chart => rng.random_range(r0..r1),
            LabelSampling::Area => swiss_roll_radius_at_arc(rng.random_range(s0..s1)),
        };
        chart[(i, 1)] = rng.random_range(z0..z1);
    }
    chart.rows_mut(n, spec.v_unlabeled).copy_from(&grid);
    let y = (0..n)
        .map(|i| {
            let eps: f64 = rng.sample(StandardNormal);
            spec.function.eval(chart[(i, 0)], chart[(i, 1)]) + spec.noise * eps
        })
        .collect();
    let truth = (0..spec.v_unlabeled).map(|i| spec.function.eval(grid[(i, 0)], grid[(i, 1)])).collect();
    Ok(Dataset {
        labeled: embed_rows(&chart.rows(0, n).into_owned())?,
        y,
        unlabeled: embed_rows(&grid)?,
        truth: Some(truth),
        chart: Some(chart),
    })
}

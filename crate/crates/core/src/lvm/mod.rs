//! Latent-variable models of a point cloud and the Riemannian geometry they
//! induce on their latent chart.
//!
//! Two model kinds are supported: the MAP-trained GPLVM and the variational
//! Bayesian GPLVM with inducing inputs. Both expose the same downstream
//! interface through [`MetricField`]: the Gaussian posterior of the mapping's
//! Jacobian, the expected metric with its coordinate gradient, the
//! magnification factor and the predictive variance of the mapping.

mod bgplvm;
mod boundary;
mod gplvm;
mod init;
mod io;
mod metric;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{RbfParams, VariationalGaussian};
use crate::optim::{OptimResult, Termination};

pub use bgplvm::{bgplvm_bound, bgplvm_bound_and_grad, kl_to_standard_normal, optimal_qu, train_bgplvm, BgplvmGrad, BoundTerms};
pub use boundary::{calibrate_boundary, default_delta, inside_boundary, BoundarySpec};
pub use gplvm::{exact_log_likelihood, gplvm_objective, gplvm_objective_and_grad, train_gplvm, GplvmGrad};
pub use init::{initial_latents, InitMethod, InitSpec};
pub use io::{data_hash, ModelFile};
pub use metric::{expected_metric, JacobianPosterior, MetricEval, MetricField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gplvm,
    Bgplvm,
}

/// Summary of the optimizer run that produced a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Objective after each accepted optimizer step.
    pub trace: Vec<f64>,
}

impl TrainingReport {
    pub(crate) fn from_optim(r: &OptimResult) -> Self {
        TrainingReport {
            objective: -r.value,
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            converged: r.converged(),
            termination: r.termination.clone(),
            trace: r.trace.iter().map(|v| -v).collect(),
        }
    }
}

/// A trained GPLVM or Bayesian GPLVM.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub kind: ModelKind,
    /// Latent posterior; variances are zero for the MAP model.
    pub latent: VariationalGaussian,
    /// Inducing inputs `m×q` (Bayesian model only).
    pub inducing: Option<DMatrix<f64>>,
    /// Inducing posterior mean `m×p`.
    pub qu_mean: Option<DMatrix<f64>>,
    /// Inducing posterior covariance `m×m`, shared across output dimensions.
    pub qu_cov: Option<DMatrix<f64>>,
    pub kernel: RbfParams,
    /// Observation noise variance of the mapping.
    pub noise_var: f64,
    /// Training point cloud `N×p` as given (uncentered).
    pub data: DMatrix<f64>,
    pub data_mean: Vec<f64>,
    pub data_hash: String,
    pub report: TrainingReport,
}

impl LatentModel {
    pub fn latent_dim(&self) -> usize {
        self.latent.dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_points(&self) -> usize {
        self.data.nrows()
    }

    /// Training data with its column means removed.
    pub fn centered_data(&self) -> DMatrix<f64> {
        centered(&self.data, &self.data_mean)
    }

    pub fn metric_field(&self) -> Result<MetricField> {
        MetricField::new(self)
    }
}

pub(crate) fn column_means(s: &DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows().max(1) as f64;
    (0..s.ncols()).map(|j| s.column(j).sum() / n).collect()
}

pub(crate) fn centered(s: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] - mean[j])
}

pub(crate) fn check_training_inputs(s: &DMatrix<f64>, q: usize) -> Result<()> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("point cloud contains non-finite values"));
    }
    if s.nrows() < 2 {
        return Err(Error::param(format!("need at least 2 points, got {}", s.nrows())));
    }
    if q == 0 || q >= s.ncols() {
        return Err(Error::param(format!(
            "latent dimension must satisfy 1 <= q < p, got q={q}, p={}",
            s.ncols()
        )));
    }
    Ok(())
}

/// Lower bound on the noise variance, relative to the mean data variance.
pub(crate) const NOISE_FLOOR_REL: f64 = 1e-6;

pub(crate) fn noise_floor(centered: &DMatrix<f64>) -> f64 {
    let n = centered.nrows().max(1) as f64;
    let var = centered.iter().map(|v| v * v).sum::<f64>() / (n * centered.ncols().max(1) as f64);
    NOISE_FLOOR_REL * var.max(1e-300)
}

/// Inverse squared lengthscales sorted by decreasing relevance, paired with
/// their latent dimension index.
pub fn ard_relevances(model: &LatentModel) -> Result<Vec<(usize, f64)>> {
    if !model.kernel.ard {
        return Err(Error::param("relevances need a kernel with per-dimension lengthscales"));
    }
    let mut v: Vec<(usize, f64)> = model.kernel.rho.iter().cloned().enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(v)
}

#[cfg(test)]
mod tests;

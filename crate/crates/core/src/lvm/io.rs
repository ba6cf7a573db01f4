//! JSON persistence of trained models.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::linalg::{from_rows, row_vec};

/// SHA-256 over the shape and row-major little-endian values of a matrix.
pub fn data_hash(s: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((s.nrows() as u64).to_le_bytes());
    h.update((s.ncols() as u64).to_le_bytes());
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            h.update(s[(i, j)].to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row_vec(m, i)).collect()
}

fn matrix(r: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.iter().any(|row| row.len() != ncols) {
        return Err(Error::shape(format!("{what}: rows must have {ncols} entries")));
    }
    if r.is_empty() {
        return Ok(DMatrix::zeros(0, ncols));
    }
    Ok(from_rows(r))
}

/// On-disk form of a [`LatentModel`]; the training data is referenced by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub n_points: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub latent_means: Vec<Vec<f64>>,
    pub latent_variances: Vec<Vec<f64>>,
    pub inducing: Option<Vec<Vec<f64>>>,
    pub qu_mean: Option<Vec<Vec<f64>>>,
    pub qu_cov: Option<Vec<Vec<f64>>>,
    pub kernel: RbfParams,
    pub noise_var: f64,
    pub data_hash: String,
    pub report: TrainingReport,
}

impl LatentModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            kind: self.kind,
            n_points: self.n_points(),
            ambient_dim: self.ambient_dim(),
            latent_dim: self.latent_dim(),
            latent_means: rows(&self.latent.means),
            latent_variances: rows(&self.latent.variances),
            inducing: self.inducing.as_ref().map(rows),
            qu_mean: self.qu_mean.as_ref().map(rows),
            qu_cov: self.qu_cov.as_ref().map(rows),
            kernel: self.kernel.clone(),
            noise_var: self.noise_var,
            data_hash: self.data_hash.clone(),
            report: self.report.clone(),
        }
    }

    /// Rebuild a model from its file form and the training data it was fit to.
    pub fn from_file(f: ModelFile, data: DMatrix<f64>) -> Result<Self> {
        let hash = data_hash(&data);
        if hash != f.data_hash {
            return Err(Error::data(format!(
                "training data hash mismatch: model expects {}, data has {hash}",
                f.data_hash
            )));
        }
        let (n, p, q) = (f.n_points, f.ambient_dim, f.latent_dim);
        if data.shape() != (n, p) {
            return Err(Error::shape(format!("model expects {n}x{p} data, got {:?}", data.shape())));
        }
        if q == 0 || q >= p {
            return Err(Error::shape(format!("invalid latent dimension {q} for {p}-d data")));
        }
        f.kernel.validate(Some(q))?;
        if !(f.noise_var > 0.0) {
            return Err(Error::param("noise variance must be positive"));
        }
        let means = matrix(&f.latent_means, q, "latent means")?;
        let variances = matrix(&f.latent_variances, q, "latent variances")?;
        if means.nrows() != n {
            return Err(Error::shape(format!("{} latents for {n} data points", means.nrows())));
        }
        let latent = VariationalGaussian::new(means, variances)?;
        let (inducing, qu_mean, qu_cov) = match f.kind {
            ModelKind::Gplvm => (None, None, None),
            ModelKind::Bgplvm => {
                let (Some(xu), Some(mu), Some(cov)) = (&f.inducing, &f.qu_mean, &f.qu_cov) else {
                    return Err(Error::data("Bayesian GPLVM file lacks the inducing posterior"));
                };
                let m = xu.len();
                let xu = matrix(xu, q, "inducing inputs")?;
                let mu = matrix(mu, p, "inducing mean")?;
                let cov = matrix(cov, m, "inducing covariance")?;
                if mu.nrows() != m || cov.nrows() != m || m == 0 || m > n {
                    return Err(Error::shape("inconsistent inducing posterior shapes"));
                }
                (Some(xu), Some(mu), Some(cov))
            }
        };
        let data_mean = column_means(&data);
        Ok(LatentModel {
            kind: f.kind,
            latent,
            inducing,
            qu_mean,
            qu_cov,
            kernel: f.kernel,
            noise_var: f.noise_var,
            data,
            data_mean,
            data_hash: hash,
            report: f.report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &self.to_file())?;
        Ok(())
    }

    pub fn load(path: &Path, data: DMatrix<f64>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let file: ModelFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_file(file, data)
    }
}

//! Initial latent coordinates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{row_vec, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum InitMethod {
    /// Projection on the leading principal components.
    Pca,
    /// Classical scaling of shortest-path distances on a k-nearest-neighbour
    /// graph. Unrolls curled sheets that PCA would fold onto themselves.
    Isomap { neighbors: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub method: InitMethod,
    /// Seed for the inducing-input subset.
    pub seed: u64,
    /// Initial latent variance; `None` uses a quarter of the squared median
    /// nearest-neighbour distance of the initial latents.
    pub variance: Option<f64>,
    /// Use one inverse squared lengthscale per latent dimension.
    pub ard: bool,
    /// Initial kernel lengthscale; `None` uses four median nearest-neighbour
    /// distances of the initial latents, capped at 1.
    pub lengthscale: Option<f64>,
    /// Initial noise variance; `None` uses 1% of the mean data variance.
    pub noise_var: Option<f64>,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { method: InitMethod::Pca, seed: 0, variance: None, ard: true, lengthscale: None, noise_var: None }
    }
}

impl InitSpec {
    pub fn isomap(neighbors: usize) -> Self {
        InitSpec { method: InitMethod::Isomap { neighbors }, ..Default::default() }
    }
}

/// Initial latents for centered data `y` (N×p), each column standardized to
/// zero mean and unit variance.
pub fn initial_latents(y: &DMatrix<f64>, q: usize, method: InitMethod) -> Result<DMatrix<f64>> {
    let x = match method {
        InitMethod::Pca => pca(y, q)?,
        InitMethod::Isomap { neighbors } => isomap(y, q, neighbors)?,
    };
    Ok(standardize(x))
}

fn pca(y: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let cov = y.transpose() * y;
    let eig = SymmetricEigen::new(cov);
    let order = descending(eig.eigenvalues.as_slice());
    let mut x = DMatrix::zeros(y.nrows(), q);
    for (c, &k) in order.iter().take(q).enumerate() {
        let v = eig.eigenvectors.column(k);
        x.set_column(c, &(y * v));
    }
    Ok(x)
}

#[derive(PartialEq)]
struct Item(f64, usize);
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Item {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

fn isomap(y: &DMatrix<f64>, q: usize, k: usize) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    if k == 0 || k >= n {
        return Err(Error::param(format!("isomap needs 1 <= neighbors < N, got {k}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_vec(y, i)).collect();
    // symmetric kNN graph
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(&rows[i], &rows[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in d.iter().take(k) {
            let w = d2.sqrt();
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    let geo = crate::exec::map_range(n, |s| dijkstra(&adj, s));
    if geo.iter().any(|r| r.iter().any(|d| !d.is_finite())) {
        return Err(Error::data(format!("neighbourhood graph with k={k} is disconnected")));
    }
    // classical scaling of squared geodesic distances
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        let d = 0.5 * (geo[i][j] + geo[j][i]);
        d * d
    });
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + total));
    let eig = SymmetricEigen::new(b);
    let order = descending(eig.eigenvalues.as_slice());
    let mut x = DMatrix::zeros(n, q);
    for (c, &idx) in order.iter().take(q).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0).sqrt();
        x.set_column(c, &(eig.eigenvectors.column(idx) * lam));
    }
    Ok(x)
}

fn dijkstra(adj: &[Vec<(usize, f64)>], s: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[s] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Item(0.0, s));
    while let Some(Item(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Item(nd, v));
            }
        }
    }
    dist
}

fn descending(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn standardize(mut x: DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows().max(1) as f64;
    for c in 0..x.ncols() {
        let mean = x.column(c).sum() / n;
        let var = x.column(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = if var > 1e-300 { var.sqrt() } else { 1.0 };
        for v in x.column_mut(c).iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    // deterministic sign: first nonzero coordinate of each column positive
    for c in 0..x.ncols() {
        if let Some(v) = x.column(c).iter().find(|v| v.abs() > 1e-12) {
            if *v < 0.0 {
                x.column_mut(c).neg_mut();
            }
        }
    }
    x
}

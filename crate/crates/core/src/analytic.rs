//! Manifolds with closed-form geometry: flat space and the Swiss roll.
//!
//! Both can be viewed through a rescaled chart `x̄ = diag(c)·x`, whose
//! metric is the pullback `ḡ(x̄) = diag(c)⁻¹ g(x) diag(c)⁻¹`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Swiss-roll chart domain: radius range and width range.
pub const SWISS_RADIUS_RANGE: (f64, f64) = (2.0, 12.5);
pub const SWISS_WIDTH_RANGE: (f64, f64) = (0.0, 8.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ManifoldKind {
    Euclidean { dim: usize },
    SwissRoll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticManifold {
    pub kind: ManifoldKind,
    /// Chart scaling relative to the base parameterization.
    pub scale: Vec<f64>,
    /// Optional box in base coordinates; outside it the chart is not used.
    pub domain: Option<Vec<(f64, f64)>>,
}

impl AnalyticManifold {
    pub fn euclidean(dim: usize) -> Self {
        AnalyticManifold { kind: ManifoldKind::Euclidean { dim }, scale: vec![1.0; dim], domain: None }
    }

    /// Swiss roll over the default radius/width box.
    pub fn swiss_roll() -> Self {
        AnalyticManifold {
            kind: ManifoldKind::SwissRoll,
            scale: vec![1.0, 1.0],
            domain: Some(vec![SWISS_RADIUS_RANGE, SWISS_WIDTH_RANGE]),
        }
    }

    pub fn with_domain(mut self, domain: Option<Vec<(f64, f64)>>) -> Self {
        self.domain = domain;
        self
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Euclidean { dim } => dim,
            ManifoldKind::SwissRoll => 2,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Euclidean { dim } => dim,
            ManifoldKind::SwissRoll => 3,
        }
    }

    /// Chart point to base-parameterization point.
    pub fn to_base(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scale).map(|(v, c)| v / c).collect()
    }

    pub fn from_base(&self, b: &[f64]) -> Vec<f64> {
        b.iter().zip(&self.scale).map(|(v, c)| v * c).collect()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = self.to_base(x);
        match self.kind {
            ManifoldKind::Euclidean { .. } => Ok(b),
            ManifoldKind::SwissRoll => Ok(swiss_roll_embed(b[0], b[1])?.to_vec()),
        }
    }

    fn base_metric(&self, b: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        match self.kind {
            ManifoldKind::Euclidean { dim } => {
                (DMatrix::identity(dim, dim), vec![DMatrix::zeros(dim, dim); dim])
            }
            ManifoldKind::SwissRoll => {
                let sm = swiss_roll_metric(b[0]);
                (sm.g, vec![sm.dg_dr, DMatrix::zeros(2, 2)])
            }
        }
    }

    /// Metric tensor at a chart point.
    pub fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let (g, _) = self.base_metric(&self.to_base(x));
        let q = self.dim();
        DMatrix::from_fn(q, q, |i, j| g[(i, j)] / (self.scale[i] * self.scale[j]))
    }

    /// `∂g/∂x^l` at a chart point, one matrix per `l`.
    pub fn metric_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let (_, dg) = self.base_metric(&self.to_base(x));
        let q = self.dim();
        (0..q)
            .map(|l| DMatrix::from_fn(q, q, |i, j| dg[l][(i, j)] / (self.scale[i] * self.scale[j] * self.scale[l])))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.domain {
            None => true,
            Some(bounds) => self.to_base(x).iter().zip(bounds).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
        }
    }
}

/// Reparameterize by `x̄ = diag(c)·x`.
pub fn rescaled_chart(manifold: &AnalyticManifold, scale: &[f64]) -> Result<AnalyticManifold> {
    if scale.len() != manifold.dim() {
        return Err(Error::shape(format!("{} scale factors for a {}-dimensional chart", scale.len(), manifold.dim())));
    }
    if scale.iter().any(|c| *c == 0.0 || !c.is_finite()) {
        return Err(Error::domain("chart scale factors must be finite and non-zero"));
    }
    let mut out = manifold.clone();
    out.scale = manifold.scale.iter().zip(scale).map(|(a, b)| a * b).collect();
    Ok(out)
}

/// `(r cos r, r sin r, z)`.
pub fn swiss_roll_embed(r: f64, z: f64) -> Result<[f64; 3]> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("Swiss-roll radius must be positive, got {r}")));
    }
    Ok([r * r.cos(), r * r.sin(), z])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwissRollMetric {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub dg_dr: DMatrix<f64>,
}

pub fn swiss_roll_metric(r: f64) -> SwissRollMetric {
    let a = 1.0 + r * r;
    SwissRollMetric {
        g: DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, 1.0]),
        g_inv: DMatrix::from_row_slice(2, 2, &[1.0 / a, 0.0, 0.0, 1.0]),
        dg_dr: DMatrix::from_row_slice(2, 2, &[2.0 * r, 0.0, 0.0, 0.0]),
    }
}

/// Arc length along the spiral from radius 0 to `r`.
pub fn swiss_roll_arc_length(r: f64) -> f64 {
    0.5 * (r * (1.0 + r * r).sqrt() + r.asinh())
}

/// Inverse of [`swiss_roll_arc_length`] by Newton iteration.
pub fn swiss_roll_radius_at_arc(s: f64) -> f64 {
    let mut r = (2.0 * s.max(0.0)).sqrt().max(1e-3);
    for _ in 0..60 {
        let f = swiss_roll_arc_length(r) - s;
        let step = f / (1.0 + r * r).sqrt();
        r -= step;
        if step.abs() < 1e-14 * r.max(1.0) {
            break;
        }
    }
    r
}

/// Heat kernel of Brownian motion in `R^q`: `(2πt)^{-q/2} exp(-|s0-s|²/(2t))`.
pub fn euclidean_heat_kernel(s0: &[f64], s: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("diffusion time must be positive, got {t}")));
    }
    if s0.len() != s.len() {
        return Err(Error::shape("heat kernel points differ in dimension"));
    }
    let q = s0.len() as f64;
    let d2 = crate::linalg::sq_dist(s0, s);
    Ok((2.0 * PI * t).powf(-q / 2.0) * (-d2 / (2.0 * t)).exp())
}

//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Minimizes; callers maximizing an objective pass its negation. Every
//! accepted step strictly decreases the objective.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub max_iters: usize,
    /// Stop when the gradient's infinity norm drops below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease over one step falls below this.
    pub rel_f_tol: f64,
    pub memory: usize,
    /// Largest change of any single coordinate in one line search.
    pub max_step: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            max_iters: 2000,
            grad_tol: 1e-5,
            rel_f_tol: 1e-12,
            memory: 10,
            max_step: 1.0,
        }
    }
}

impl OptimizerSpec {
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::GradientTolerance | Termination::FunctionTolerance
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: &[f64], spec: &OptimizerSpec) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return OptimResult {
            grad_norm: f64::INFINITY,
            value: fx,
            x,
            iterations: 0,
            termination: Termination::LineSearchFailed,
            trace: vec![],
        };
    }
    let mut trace = vec![fx];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut small_steps = 0;

    while iterations < spec.max_iters {
        if inf_norm(&g) < spec.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &d);
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= a * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt();
            let scale = 1.0 / gn.max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alphas[i] - b) * sj;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) || !slope.is_finite() {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let gn = dot(&g, &g).sqrt();
            d = g.iter().map(|v| -v / gn.max(1.0)).collect();
            slope = dot(&g, &d);
        }

        // backtracking Armijo search
        let dmax = inf_norm(&d);
        let mut step = if dmax > spec.max_step { spec.max_step / dmax } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (fn_, gn_) = f(&xn);
            if fn_.is_finite()
                && gn_.iter().all(|v| v.is_finite())
                && fn_ <= fx + 1e-4 * step * slope
                && fn_ < fx
            {
                accepted = Some((xn, fn_, gn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn_)) = accepted else {
            if s_hist.is_empty() {
                termination = Termination::LineSearchFailed;
                break;
            }
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn_.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == spec.memory.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn_;
        trace.push(fx);
        if decrease <= spec.rel_f_tol * (1.0 + fx.abs()) {
            small_steps += 1;
            if small_steps >= 3 {
                termination = Termination::FunctionTolerance;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    debug_assert_eq!(x.len(), n);
    OptimResult {
        grad_norm: inf_norm(&g),
        value: fx,
        x,
        iterations,
        termination,
        trace,
    }
}

/// Central finite-difference gradient, used by tests and diagnostics.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = xp[i];
            xp[i] = x0 + h;
            let fp = f(&xp);
            xp[i] = x0 - h;
            let fm = f(&xp);
            xp[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

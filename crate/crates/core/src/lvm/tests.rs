use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::optim::{finite_diff_grad, OptimizerSpec};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

#[test]
fn kl_vanishes_for_standard_normal() {
    let qx = VariationalGaussian::new(DMatrix::zeros(5, 2), DMatrix::from_element(5, 2, 1.0)).unwrap();
    assert!(kl_to_standard_normal(&qx).abs() < 1e-15);
}

#[test]
fn bgplvm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, m, q, p) = (6, 3, 2, 4);
    let y = random(&mut rng, n, p, -1.0, 1.0);
    let means = random(&mut rng, n, q, -1.0, 1.0);
    let vars = random(&mut rng, n, q, 0.05, 0.5);
    let xu = random(&mut rng, m, q, -1.0, 1.0);
    let kernel = RbfParams::ard(1.3, vec![0.7, 1.8]).unwrap();
    let noise = 0.2;
    let qx = VariationalGaussian::new(means.clone(), vars.clone()).unwrap();
    let (_, g) = bgplvm_bound_and_grad(&y, &qx, &xu, &kernel, noise).unwrap();

    // parameter vector: means, variances, xu, gamma, rho, noise
    let mut x0: Vec<f64> = means.iter().cloned().collect();
    x0.extend(vars.iter());
    x0.extend(xu.iter());
    x0.push(kernel.gamma);
    x0.extend(&kernel.rho);
    x0.push(noise);
    let f = |t: &[f64]| {
        let mm = DMatrix::from_column_slice(n, q, &t[..n * q]);
        let vv = DMatrix::from_column_slice(n, q, &t[n * q..2 * n * q]);
        let o = 2 * n * q;
        let zz = DMatrix::from_column_slice(m, q, &t[o..o + m * q]);
        let o = o + m * q;
        let k = RbfParams { gamma: t[o], rho: vec![t[o + 1], t[o + 2]], ard: true };
        let b = bgplvm_bound(&y, &VariationalGaussian { means: mm, variances: vv }, &zz, &k, t[o + 3]).unwrap();
        b.bound()
    };
    let fd = finite_diff_grad(f, &x0, 1e-6);
    let mut an: Vec<f64> = g.d_means.iter().cloned().collect();
    an.extend(g.d_variances.iter());
    an.extend(g.d_xu.iter());
    an.push(g.d_gamma);
    an.extend(&g.d_rho);
    an.push(g.d_noise);
    let bad: Vec<String> = an
        .iter()
        .zip(&fd)
        .enumerate()
        .filter(|(_, (a, b))| rel_err(**a, **b) >= 1e-4)
        .map(|(i, (a, b))| format!("{i}: {a} vs {b}"))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn gplvm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, q, p) = (7, 2, 3);
    let y = random(&mut rng, n, p, -1.0, 1.0);
    let x = random(&mut rng, n, q, -1.0, 1.0);
    let kernel = RbfParams::ard(0.9, vec![1.1, 0.4]).unwrap();
    let noise = 0.15;
    let (_, g) = gplvm_objective_and_grad(&y, &x, &kernel, noise).unwrap();
    let mut x0: Vec<f64> = x.iter().cloned().collect();
    x0.extend([kernel.gamma, kernel.rho[0], kernel.rho[1], noise]);
    let f = |t: &[f64]| {
        let xx = DMatrix::from_column_slice(n, q, &t[..n * q]);
        let o = n * q;
        let k = RbfParams { gamma: t[o], rho: vec![t[o + 1], t[o + 2]], ard: true };
        gplvm_objective(&y, &xx, &k, t[o + 3]).unwrap()
    };
    let fd = finite_diff_grad(f, &x0, 1e-6);
    let mut an: Vec<f64> = g.d_x.iter().cloned().collect();
    an.extend([g.d_gamma, g.d_rho[0], g.d_rho[1], g.d_noise]);
    for (i, (a, b)) in an.iter().zip(&fd).enumerate() {
        assert!(rel_err(*a, *b) < 1e-4, "component {i}: analytic {a} vs fd {b}");
    }
}

#[test]
fn bound_does_not_exceed_exact_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, q, p) = (8, 2, 3);
    let y = random(&mut rng, n, p, -1.0, 1.0);
    let means = random(&mut rng, n, q, -1.5, 1.5);
    let kernel = RbfParams::ard(1.0, vec![0.8, 1.2]).unwrap();
    let noise = 0.1;
    let exact = exact_log_likelihood(&y, &means, &kernel, noise).unwrap();
    for &m in &[2usize, 4, 8] {
        let xu = DMatrix::from_fn(m, q, |j, d| means[(j, d)] + 0.05);
        for &s in &[1e-4, 1e-2, 0.1] {
            let qx = VariationalGaussian::new(means.clone(), DMatrix::from_element(n, q, s)).unwrap();
            let b = bgplvm_bound(&y, &qx, &xu, &kernel, noise).unwrap();
            assert!(b.bound() <= exact, "m={m} s={s}: bound {} > exact {exact}", b.bound());
        }
    }
}

#[test]
fn bound_collapses_to_gplvm_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, q, p) = (9, 2, 3);
    let y = random(&mut rng, n, p, -1.0, 1.0);
    let means = random(&mut rng, n, q, -1.5, 1.5);
    let kernel = RbfParams::ard(1.2, vec![0.5, 0.9]).unwrap();
    let noise = 0.05;
    let qx = VariationalGaussian::point_masses(means.clone());
    let b = bgplvm_bound(&y, &qx, &means, &kernel, noise).unwrap();
    let exact = exact_log_likelihood(&y, &means, &kernel, noise).unwrap();
    assert!(rel_err(b.data_term, exact) < 1e-6, "{} vs {exact}", b.data_term);
}

#[test]
fn too_many_inducing_inputs_rejected() {
    let s = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
    let r = train_bgplvm(&s, 1, 6, &InitSpec::default(), &OptimizerSpec::default());
    assert!(matches!(r, Err(Error::Param(_))));
}

#[test]
fn latent_dim_must_be_below_data_dim() {
    let s = DMatrix::from_fn(5, 2, |i, j| (i * j) as f64);
    assert!(train_gplvm(&s, 2, &InitSpec::default(), &OptimizerSpec::default()).is_err());
}

#[test]
fn non_finite_data_rejected() {
    let mut s = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
    s[(2, 1)] = f64::NAN;
    assert!(matches!(
        train_gplvm(&s, 1, &InitSpec::default(), &OptimizerSpec::default()),
        Err(Error::Data(_))
    ));
}

fn linear_cloud(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = [[1.0, 0.3], [-0.5, 0.8], [0.2, -0.7], [0.9, 0.1]];
    let x = random(&mut rng, n, 2, -1.0, 1.0);
    DMatrix::from_fn(n, 4, |i, j| a[j][0] * x[(i, 0)] + a[j][1] * x[(i, 1)])
}

#[test]
fn gplvm_reconstructs_linear_data() {
    let s = linear_cloud(30, 1);
    let model = train_gplvm(&s, 2, &InitSpec::default(), &OptimizerSpec::default()).unwrap();
    let tr = &model.report.trace;
    assert!(tr.windows(2).all(|w| w[1] >= w[0]), "objective decreased");
    let field = model.metric_field().unwrap();
    for i in 0..s.nrows() {
        let rec = field.mean(&crate::linalg::row_vec(&model.latent.means, i)).unwrap();
        for j in 0..4 {
            assert!((rec[j] - s[(i, j)]).abs() < 1e-2, "point {i} coord {j}");
        }
    }
}

fn small_bgplvm() -> LatentModel {
    let s = linear_cloud(25, 4);
    let curved = DMatrix::from_fn(25, 4, |i, j| s[(i, j)] + 0.3 * (2.0 * s[(i, 0)]).sin() * (j as f64 - 1.5));
    let opt = OptimizerSpec::default().with_max_iters(300);
    train_bgplvm(&curved, 2, 10, &InitSpec::default(), &opt).unwrap()
}

#[test]
fn bgplvm_training_improves_bound_and_sets_qu() {
    let model = small_bgplvm();
    let tr = &model.report.trace;
    assert!(tr.windows(2).all(|w| w[1] >= w[0]));
    let cov = model.qu_cov.as_ref().unwrap();
    assert!(crate::linalg::max_asymmetry(cov) < 1e-12);
    assert!(crate::linalg::min_eigenvalue(cov) > -1e-8 * cov.diagonal().max());
    assert_eq!(model.qu_mean.as_ref().unwrap().ncols(), 4);
}

#[test]
fn jacobian_mean_matches_posterior_mean_derivative() {
    for model in [small_bgplvm(), train_gplvm(&linear_cloud(20, 9), 2, &InitSpec::default(), &OptimizerSpec::default().with_max_iters(200)).unwrap()] {
        let field = model.metric_field().unwrap();
        let x = crate::linalg::row_vec(&model.latent.means, 3);
        let x = vec![x[0] + 0.07, x[1] - 0.04];
        let jp = field.jacobian_posterior(&x).unwrap();
        let h = 1e-6;
        for l in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[l] += h;
            xm[l] -= h;
            let (fp, fm) = (field.mean(&xp).unwrap(), field.mean(&xm).unwrap());
            for j in 0..4 {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                assert!(rel_err(jp.mean[(l, j)], fd) < 1e-4, "{:?} l={l} j={j}: {} vs {fd}", model.kind, jp.mean[(l, j)]);
            }
        }
    }
}

#[test]
fn metric_gradient_matches_finite_differences() {
    let model = small_bgplvm();
    let field = model.metric_field().unwrap();
    let x = vec![0.2, -0.3];
    let ev = field.metric_eval(&x).unwrap();
    assert_eq!(ev.jitter, 0.0);
    let h = 1e-5;
    let scale = ev.dg.iter().map(|m| m.amax()).fold(0.0, f64::max);
    for l in 0..2 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[l] += h;
        xm[l] -= h;
        let fd = (field.metric_eval(&xp).unwrap().g - field.metric_eval(&xm).unwrap().g) / (2.0 * h);
        let err = (&fd - &ev.dg[l]).amax() / scale;
        assert!(err < 1e-4, "l={l}: {err}");
        assert!(crate::linalg::max_asymmetry(&ev.dg[l]) < 1e-12);
    }
    assert!((ev.mf - ev.g.determinant().sqrt()).abs() < 1e-12 * ev.mf);
}

#[test]
fn jacobian_at_single_training_point_has_zero_mean() {
    let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
    let model = LatentModel {
        kind: ModelKind::Gplvm,
        latent: VariationalGaussian::point_masses(DMatrix::from_row_slice(1, 2, &[0.3, -0.2])),
        inducing: None,
        qu_mean: None,
        qu_cov: None,
        kernel: RbfParams::isotropic(1.0, 0.5).unwrap(),
        noise_var: 0.1,
        data: s.rows(0, 1).into_owned(),
        data_mean: vec![0.0; 3],
        data_hash: String::new(),
        report: TrainingReport::from_optim(&crate::optim::minimize(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[0.0], &OptimizerSpec::default())),
    };
    let field = model.metric_field().unwrap();
    let jp = field.jacobian_posterior(&[0.3, -0.2]).unwrap();
    assert!(jp.mean.amax() < 1e-15);
    // far from the data the covariance returns to the prior derivative covariance
    let far = field.jacobian_posterior(&[40.0, 40.0]).unwrap();
    let prior = crate::kernels::kernel_hess_at_star(&model.kernel, 2);
    assert!((far.cov - prior).amax() < 1e-12);
}

#[test]
fn identity_jacobian_gives_identity_metric() {
    let jp = JacobianPosterior { mean: DMatrix::identity(3, 3), cov: DMatrix::zeros(3, 3) };
    let g = expected_metric(&jp);
    assert!((g.clone() - DMatrix::identity(3, 3)).amax() < 1e-15);
    assert!((g.determinant().sqrt() - 1.0).abs() < 1e-15);
    let mean = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
    let jp = JacobianPosterior { mean: mean.clone(), cov: DMatrix::identity(2, 2) * 0.3 };
    let expect = &mean * mean.transpose() + DMatrix::identity(2, 2) * 0.9;
    assert!((expected_metric(&jp) - expect).amax() < 1e-14);
}

#[test]
fn variance_grows_away_from_data() {
    let model = small_bgplvm();
    let field = model.metric_field().unwrap();
    let x = &model.latent.means;
    let corner: Vec<f64> = (0..2)
        .map(|d| 3.0 * x.column(d).iter().cloned().fold(0.0, |a, b| f64::max(a, b.abs())))
        .collect();
    let vc = field.var_map(&corner).unwrap();
    for i in 0..x.nrows() {
        assert!(field.var_map(&crate::linalg::row_vec(x, i)).unwrap() <= vc + 1e-12);
    }
}

#[test]
fn boundary_calibration() {
    let model = small_bgplvm();
    let field = model.metric_field().unwrap();
    let delta = default_delta(&field);
    let b1 = calibrate_boundary(&field, delta, 10, 7).unwrap();
    let b2 = calibrate_boundary(&field, delta, 10, 7).unwrap();
    assert_eq!(b1, b2);
    let x = &model.latent.means;
    let train_max = (0..x.nrows())
        .map(|i| field.var_map(&crate::linalg::row_vec(x, i)).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(b1.alpha > train_max);
    for i in 0..x.nrows() {
        assert!(inside_boundary(&field, &b1, &crate::linalg::row_vec(x, i)).unwrap());
    }
    assert!(!inside_boundary(&field, &b1, &[50.0, 50.0]).unwrap());
    let tiny = calibrate_boundary(&field, 1e-6, 10, 7).unwrap();
    assert!((tiny.alpha - train_max).abs() < 1e-6);
    assert!(calibrate_boundary(&field, 0.0, 10, 7).is_err());
}

#[test]
fn relevances_sorted_and_isotropic_rejected() {
    let mut model = small_bgplvm();
    model.kernel = RbfParams::ard(1.0, vec![0.3, 2.0]).unwrap();
    assert_eq!(ard_relevances(&model).unwrap(), vec![(1, 2.0), (0, 0.3)]);
    model.kernel = RbfParams::isotropic(1.0, 0.3).unwrap();
    assert!(ard_relevances(&model).is_err());
}

#[test]
fn relevance_identifies_active_dimension() {
    // data driven by a single latent direction; the second latent is unused
    let n = 30;
    let s = DMatrix::from_fn(n, 3, |i, j| {
        let t = -1.5 + 3.0 * i as f64 / (n - 1) as f64;
        [t, (1.3 * t).sin(), 0.5 * t * t][j]
    });
    let init = InitSpec { noise_var: Some(1e-3), ..Default::default() };
    let model = train_bgplvm(&s, 2, 12, &init, &OptimizerSpec::default().with_max_iters(500)).unwrap();
    let r = ard_relevances(&model).unwrap();
    let active = model.latent.means.column(0).iter().map(|v| v * v).sum::<f64>()
        >= model.latent.means.column(1).iter().map(|v| v * v).sum::<f64>();
    assert_eq!(r[0].0, if active { 0 } else { 1 });
    assert!(r[0].1 > r[1].1);
}

#[test]
fn model_round_trips_through_json() {
    let model = small_bgplvm();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = LatentModel::load(&path, model.data.clone()).unwrap();
    assert_eq!(back.latent, model.latent);
    assert_eq!(back.qu_cov, model.qu_cov);
    let mut other = model.data.clone();
    other[(0, 0)] += 1e-9;
    assert!(matches!(LatentModel::load(&path, other), Err(Error::Data(_))));
}

use rayon::prelude::*;
use swcrt_core::correlation::CorrelationSpec;
use swcrt_core::design::{design_matrix, StructureKind};
use swcrt_core::dgp::{simulate_replicate, ScenarioSpec};
use swcrt_core::gls::{fit_feasible_gls, fit_ols, information_criteria};
use swcrt_core::mc::{run_study, standard_analyses};
use swcrt_core::variance::VarianceMethod;

#[test]
fn simulated_cell_means_have_the_model_moments() {
    let s = ScenarioSpec::preset("sim3-calendar", 17).unwrap();
    let reps = 2000;
    let expected = s.expected_means();
    let draws: Vec<_> = (0..reps as u64)
        .into_par_iter()
        .map(|r| simulate_replicate(&s, r).unwrap().means().clone())
        .collect();
    let var = 1.0 / 9.0 + 1.0 / 30.0;
    let se = (var / reps as f64).sqrt();
    for c in 0..18 {
        for j in 0..10 {
            let m = draws.iter().map(|d| d[(c, j)]).sum::<f64>() / reps as f64;
            assert!((m - expected[(c, j)]).abs() < 4.5 * se, "cell ({c},{j}): {m}");
        }
    }
    // pooled variance and within-cluster covariance of the residual means
    let (mut ss, mut cross, mut n_ss, mut n_cross) = (0.0, 0.0, 0.0, 0.0);
    for d in &draws {
        let e = d - &expected;
        for c in 0..18 {
            for j in 0..10 {
                ss += e[(c, j)].powi(2);
                n_ss += 1.0;
                for k in (j + 1)..10 {
                    cross += e[(c, j)] * e[(c, k)];
                    n_cross += 1.0;
                }
            }
        }
    }
    let v_hat = ss / n_ss;
    let cov_hat = cross / n_cross;
    assert!((v_hat / var - 1.0).abs() < 0.02, "variance {v_hat}");
    assert!((cov_hat / v_hat - 10.0 / 13.0).abs() < 0.02, "correlation {}", cov_hat / v_hat);
}

#[test]
fn estimated_correlation_piles_up_at_zero_without_cluster_effects() {
    let mut s = ScenarioSpec::preset("sim1-immediate", 3).unwrap();
    s.correlation = CorrelationSpec::exchangeable(0.0, 1.0);
    let dm = design_matrix(&s.design, StructureKind::Immediate, false).unwrap();
    let gammas: Vec<f64> = (0..500u64)
        .into_par_iter()
        .map(|r| fit_feasible_gls(&dm, simulate_replicate(&s, r).unwrap().means()).unwrap().gamma())
        .collect();
    // roughly half the estimates sit on the boundary and the rest form a
    // half-normal tail with scale near 0.034
    let zero = gammas.iter().filter(|&&g| g <= 1e-6).count();
    let small = gammas.iter().filter(|&&g| g <= 0.05).count();
    assert!((200..=330).contains(&zero), "{zero} of 500 on the boundary");
    assert!(small >= 425, "{small} of 500 at or below 0.05");
}

#[test]
fn estimated_correlation_centres_on_truth() {
    let s = ScenarioSpec::preset("sim2-exposure", 8).unwrap();
    let dm = design_matrix(&s.design, StructureKind::ExposureVarying, false).unwrap();
    let mut gammas: Vec<f64> = (0..300u64)
        .into_par_iter()
        .map(|r| fit_feasible_gls(&dm, simulate_replicate(&s, r).unwrap().means()).unwrap().gamma())
        .collect();
    gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = gammas[150];
    assert!((median - 10.0 / 13.0).abs() < 0.05, "median {median}");
}

/// Restricted log-likelihood with the scale profiled out, from dense matrices.
fn dense_reml(dm: &swcrt_core::design::DesignMatrix, y: &nalgebra::DMatrix<f64>, g: f64) -> f64 {
    let z = dm.matrix();
    let (n, p) = (z.nrows(), z.ncols());
    let j = dm.n_periods();
    let v = nalgebra::DMatrix::from_fn(n, n, |a, b| {
        if a / j != b / j {
            0.0
        } else if a == b {
            1.0
        } else {
            g
        }
    });
    let yv = nalgebra::DVector::from_fn(n, |r, _| y[(r / j, r % j)]);
    let w = v.clone().try_inverse().unwrap();
    let info = z.transpose() * &w * z;
    let beta = info.clone().try_inverse().unwrap() * z.transpose() * &w * &yv;
    let r = &yv - z * beta;
    let q = (r.transpose() * &w * &r)[(0, 0)];
    let df = (n - p) as f64;
    -0.5 * (df * ((2.0 * std::f64::consts::PI).ln() + (q / df).ln() + 1.0)
        + v.determinant().ln()
        + info.determinant().ln())
}

#[test]
fn restricted_likelihood_matches_dense_oracle() {
    let s = ScenarioSpec::preset("sim1-immediate", 5).unwrap();
    let dm = design_matrix(&s.design, StructureKind::Immediate, false).unwrap();
    for r in 0..3 {
        let data = simulate_replicate(&s, r).unwrap();
        let y = data.means();
        let fit = fit_feasible_gls(&dm, y).unwrap();
        let at_hat = dense_reml(&dm, y, fit.gamma());
        assert!((fit.reml_log_likelihood().unwrap() - at_hat).abs() < 1e-6);
        for k in 0..=99 {
            let g = k as f64 / 100.0;
            assert!(dense_reml(&dm, y, g) <= at_hat + 1e-9, "gamma {g} beats the estimate");
        }
    }
}

#[test]
fn likelihood_respects_model_nesting() {
    let s = ScenarioSpec::preset("sim2-exposure", 21).unwrap();
    let it = design_matrix(&s.design, StructureKind::Immediate, false).unwrap();
    let eti = design_matrix(&s.design, StructureKind::ExposureVarying, false).unwrap();
    for r in 0..40 {
        let data = simulate_replicate(&s, r).unwrap();
        let y = data.means();
        let small = fit_feasible_gls(&it, y).unwrap();
        let big = fit_feasible_gls(&eti, y).unwrap();
        let ols = fit_ols(&it, y).unwrap();
        let ll = |f: &swcrt_core::gls::FitResult| f.log_likelihood().unwrap();
        assert!(ll(&big) >= ll(&small) - 1e-8, "replicate {r}");
        assert!(ll(&small) >= ll(&ols) - 1e-8, "replicate {r}");
        let (aic, bic) = information_criteria(&small, small.n_obs()).unwrap();
        let k = small.n_parameters() as f64;
        assert!((aic - (-2.0 * ll(&small) + 2.0 * k)).abs() < 1e-9);
        assert!((bic - (-2.0 * ll(&small) + k * (small.n_obs() as f64).ln())).abs() < 1e-9);
    }
}

#[test]
fn study_output_does_not_depend_on_thread_count() {
    let s = ScenarioSpec::preset("sim3-calendar", 0).unwrap();
    let analyses = standard_analyses(&[VarianceMethod::ModelBased, VarianceMethod::CR2]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_study(&s, &analyses, 24, 77).unwrap())
    };
    let one = run(1);
    let many = run(4);
    assert_eq!(one.len(), many.len());
    for (a, b) in one.iter().zip(&many) {
        assert_eq!(a.mean_estimate.to_bits(), b.mean_estimate.to_bits());
        assert_eq!(a.precision.to_bits(), b.precision.to_bits());
        assert_eq!(a.coverage.to_bits(), b.coverage.to_bits());
        assert_eq!(a.mc_se.to_bits(), b.mc_se.to_bits());
    }
}

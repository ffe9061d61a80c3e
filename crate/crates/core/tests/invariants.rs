use std::path::Path;

use sgnd_core::inference::RefitSupport;
use sgnd_core::io::{delta_bic_table, read_csv};
use sgnd_core::model::{standardize, PenaltySpec, Problem};
use sgnd_core::optimizer::{fit_at_eps, initialize, telescope_fit, FitConfig, FreeMask};
use sgnd_core::simulation::{replicate_data, run_study, SimScenario};
use statrs::distribution::{ContinuousCDF, Normal};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn warm_starts_need_fewer_iterations() {
    let warm = FitConfig::default();
    let mut cold = FitConfig::default();
    cold.telescope.warm_start = false;
    for seed in 0..5 {
        let data = replicate_data(&SimScenario::table1(2.0, 500, seed), 0).unwrap();
        let w = telescope_fit(&data, &warm).unwrap();
        let c = telescope_fit(&data, &cold).unwrap();
        assert!(
            w.diagnostics.total_iterations() <= c.diagnostics.total_iterations(),
            "seed {seed}: warm {} cold {}",
            w.diagnostics.total_iterations(),
            c.diagnostics.total_iterations()
        );
    }
}

#[test]
fn objective_never_decreases_within_a_step() {
    let data = standardize(&replicate_data(&SimScenario::table1(1.0, 300, 9), 0).unwrap()).unwrap();
    let cfg = FitConfig::default();
    let mask = FreeMask::all(data.p());
    let lambda = cfg.criterion.lambda(data.n());
    let mut theta = initialize(&data, &mask, cfg.kappa_min).unwrap();
    let mut problem = Problem::new(&data, PenaltySpec::new(lambda, 10.0).unwrap(), cfg.tau, cfg.kappa_min);
    for eps in cfg.telescope.epsilons().into_iter().step_by(9) {
        problem.set_epsilon(eps);
        let (next, rep) = fit_at_eps(&problem, &theta, &mask, &cfg.telescope).unwrap();
        for w in rep.trace.windows(2) {
            assert!(w[1] >= w[0], "eps {eps}: {} -> {}", w[0], w[1]);
        }
        theta = next;
    }
}

#[test]
fn pure_noise_selects_nothing() {
    let sc = SimScenario::null(500, 77);
    let study = run_study(&sc, 20, &FitConfig::default(), 1).unwrap();
    let empty = study
        .records
        .iter()
        .filter(|r| {
            let t = r.theta.as_ref().unwrap();
            t[1..13].iter().chain(&t[14..26]).all(|v| *v == 0.0)
        })
        .count();
    assert!(empty >= 18, "{empty} of 20 empty fits");
}

#[test]
fn normal_limit_residuals_pass_ks() {
    let mut sc = SimScenario::table1(2.0, 10_000, 5);
    sc.alpha_true = vec![0.0; 13];
    sc.tau = 1e-8;
    let data = replicate_data(&sc, 0).unwrap();
    let mu = &data.x * nalgebra::DVector::from_vec(sc.beta_true.clone());
    // κ = 2 with unit scale is N(0, 1/2)
    let mut z: Vec<f64> = (0..sc.n).map(|i| (data.y[i] - mu[i]) * 2f64.sqrt()).collect();
    z.sort_by(f64::total_cmp);
    let std = Normal::new(0.0, 1.0).unwrap();
    let n = z.len() as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = std.cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    assert!(d < 1.6276 / n.sqrt(), "D = {d}");
}

#[test]
fn boston_delta_bic_is_roughly_additive() {
    let data = read_csv(&fixture("boston_corrected.csv"), "lcmedv", None).unwrap();
    let cfg = FitConfig::default();
    let fit = telescope_fit(&data, &cfg).unwrap();
    let rows = delta_bic_table(&data, &fit, &cfg, &data.names, RefitSupport::Fixed).unwrap();
    for r in rows {
        if let Some(both) = r.d_both {
            let m = r.d_beta.unwrap_or(f64::MIN).max(r.d_alpha.unwrap_or(f64::MIN));
            assert!(both >= m - 10.0, "{}: both {both} max {m}", r.variable);
        }
    }
}

#[test]
fn estimation_error_shrinks_with_n() {
    let cfg = FitConfig::default();
    let mse = |n: usize| {
        let sc = SimScenario::table1(2.0, n, 31);
        run_study(&sc, 4, &cfg, 1).unwrap().summary
    };
    let (small, large) = (mse(500), mse(5000));
    assert!(large.beta.mse < small.beta.mse, "{} vs {}", large.beta.mse, small.beta.mse);
    assert!(large.alpha.mse < small.alpha.mse, "{} vs {}", large.alpha.mse, small.alpha.mse);
}

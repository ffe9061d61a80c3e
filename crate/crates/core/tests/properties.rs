use nalgebra::DVector;
use proptest::prelude::*;
use sgnd_core::model::{phi_eps, scale_theta, smooth_l0, unscale_theta, ThetaVector};
use sgnd_core::optimizer::threshold_zero;
use sgnd_core::sgnd::{cdf, log_density_with, norm_const, smooth_abs, SgndShape};
use sgnd_core::TelescopeConfig;

fn theta_strategy(p: usize) -> impl Strategy<Value = ThetaVector> {
    (
        prop::collection::vec(-5.0..5.0f64, p + 1),
        prop::collection::vec(-5.0..5.0f64, p + 1),
        -3.0..3.0f64,
    )
        .prop_map(|(b, a, nu0)| ThetaVector {
            beta: DVector::from_vec(b),
            alpha: DVector::from_vec(a),
            nu0,
        })
}

proptest! {
    #[test]
    fn smooth_abs_is_bracketed_by_abs(z in -1e3..1e3f64, tau in 1e-8..2.0f64) {
        let a = smooth_abs(z, tau);
        prop_assert!(a >= 0.0);
        prop_assert!(a <= z.abs() * (1.0 + 1e-15));
        prop_assert!(z.abs() <= a + tau + 1e-12 * z.abs().max(1.0));
        prop_assert_eq!(a, smooth_abs(-z, tau));
    }

    #[test]
    fn phi_is_a_bounded_smooth_indicator(theta in -1e3..1e3f64, eps in 1e-6..10.0f64) {
        let (v, d1, _) = phi_eps(theta, eps);
        prop_assert!((0.0..1.0).contains(&v) || (v == 1.0 && theta.abs() > 1e6 * eps));
        prop_assert!(d1 * theta >= 0.0);
        prop_assert!(phi_eps(theta, eps * 2.0).0 <= v);
    }

    #[test]
    fn smooth_l0_lies_between_zero_and_p(
        coef in prop::collection::vec(-10.0..10.0f64, 1..8),
        eps in 1e-4..10.0f64,
    ) {
        let c = DVector::from_vec(coef);
        let p = (c.len() - 1) as f64;
        let v = smooth_l0(&c, eps);
        prop_assert!(v >= 0.0 && v <= p);
        prop_assert!(smooth_l0(&c, eps / 3.0) >= v);
    }

    #[test]
    fn rescaling_round_trips(
        theta in theta_strategy(4),
        sd in prop::collection::vec(0.01..100.0f64, 4),
    ) {
        let sd = DVector::from_vec(sd);
        let back = scale_theta(&unscale_theta(&theta, &sd), &sd);
        prop_assert!(back.max_abs_diff(&theta) <= 1e-12 * 500.0);
        prop_assert_eq!(unscale_theta(&theta, &sd).beta[0], theta.beta[0]);
        prop_assert_eq!(unscale_theta(&theta, &sd).nu0, theta.nu0);
    }

    #[test]
    fn thresholding_zeroes_only_small_slopes(theta in theta_strategy(5), tol in 1e-6..1.0f64) {
        let t = threshold_zero(&theta, tol);
        prop_assert_eq!(t.beta[0], theta.beta[0]);
        prop_assert_eq!(t.alpha[0], theta.alpha[0]);
        prop_assert_eq!(t.nu0, theta.nu0);
        for (c, o) in [(&t.beta, &theta.beta), (&t.alpha, &theta.alpha)] {
            for j in 1..c.len() {
                if o[j].abs() < tol {
                    prop_assert_eq!(c[j], 0.0);
                } else {
                    prop_assert_eq!(c[j], o[j]);
                }
            }
        }
    }

    #[test]
    fn telescope_is_geometric(start in 1e-2..100.0f64, ratio in 1e-6..0.5f64, steps in 2usize..200) {
        let cfg = TelescopeConfig::new(start, start * ratio, steps).unwrap();
        let e = cfg.epsilons();
        prop_assert_eq!(e.len(), steps);
        prop_assert_eq!(e[0], start);
        prop_assert_eq!(*e.last().unwrap(), start * ratio);
        let r = e[1] / e[0];
        for w in e.windows(2) {
            prop_assert!(((w[1] / w[0]) - r).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cdf_is_monotone_and_symmetric(
        kappa in 0.5..4.0f64,
        tau in 0.01..0.3f64,
        mu in -3.0..3.0f64,
        s in 0.2..5.0f64,
        mut ys in prop::collection::vec(-10.0..10.0f64, 2..12),
    ) {
        let shape = SgndShape::new(kappa, tau, 0.2).unwrap();
        ys.sort_by(f64::total_cmp);
        let mut last = 0.0;
        for &y in &ys {
            let f = cdf(y, mu, s, &shape).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= last - 1e-12);
            last = f;
            let mirror = cdf(2.0 * mu - y, mu, s, &shape).unwrap();
            prop_assert!((f + mirror - 1.0).abs() <= 1e-8);
        }
        prop_assert!((cdf(mu, mu, s, &shape).unwrap() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn density_integrates_to_one(kappa in 0.8..4.0f64, tau in 0.01..0.3f64, s in 0.3..3.0f64) {
        let shape = SgndShape::new(kappa, tau, 0.2).unwrap();
        let nc = norm_const(&shape).unwrap();
        let f = |y: f64| log_density_with(y, 0.0, s, &shape, &nc).exp();
        // composite Simpson on the half line, doubled by symmetry
        let (upper, m) = (400.0 * s, 200_000);
        let h = upper / m as f64;
        let mut acc = f(0.0) + f(upper);
        for i in 1..m {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        prop_assert!((2.0 * acc * h / 3.0 - 1.0).abs() <= 1e-6);
    }
}

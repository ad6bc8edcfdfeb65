use std::sync::Arc;

use proptest::prelude::*;

use multiscale::asymptotics::build_bundle;
use multiscale::experiments::fit::log_log_fit;
use multiscale::factors::{
    averaged_sharpe, Correlations, MarketModel, OrnsteinUhlenbeck, Sharpe, SlowDrift, SlowVol,
    Volatility,
};
use multiscale::merton::{power_point, solve_merton};
use multiscale::simulate::{simulate_paths, FloorBehavior, SimConfig, Strategy};
use multiscale::{MertonMethod, UtilitySpec};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn model(rho: (f64, f64, f64), eps: f64, delta: f64) -> MarketModel {
    MarketModel::new(
        Sharpe::AffineZTanhY {
            base: 0.5,
            z_slope: 0.3,
            y_amp: 0.3,
        },
        Volatility::Constant { value: 0.2 },
        SlowDrift::MeanReverting {
            rate: 1.0,
            level: 0.0,
        },
        SlowVol::Constant { value: 1.0 },
        Arc::new(OrnsteinUhlenbeck::new(0.0, 1.0).unwrap()),
        Correlations::new(rho.0, rho.1, rho.2).unwrap(),
        eps,
        delta,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixtures_are_increasing_concave_and_invertible(
        w in proptest::collection::vec(0.1f64..5.0, 1..4),
        g in proptest::collection::vec(0.05f64..0.95, 3),
        x in 1e-3f64..1e3,
    ) {
        let exps = &g[..w.len()];
        let u = UtilitySpec::mixture(&w, exps).unwrap();
        prop_assert!(u.marginal(x) > 0.0);
        prop_assert!(u.second(x) < 0.0);
        prop_assert!(rel(u.inverse_marginal(u.marginal(x)), x) < 1e-10);
    }

    #[test]
    fn power_operators_scale_the_value(
        g in 0.05f64..0.95,
        lam in 0.0f64..1.5,
        tau in 0.0f64..2.0,
        x in 0.01f64..100.0,
    ) {
        let p = power_point(g, lam, tau, x);
        let k = g / (1.0 - g);
        prop_assert!(rel(p.d1(), k * p.value) < 1e-12);
        prop_assert!(rel(p.d2(), -k * p.value) < 1e-12);
        prop_assert!(rel(p.d1_squared(), k * k * p.value) < 1e-12);
        prop_assert!(rel(p.risk_tolerance, x / (1.0 - g)) < 1e-14);
    }

    #[test]
    fn dual_agrees_with_closed_form(
        g in 0.1f64..0.9,
        lam in 0.05f64..1.2,
        tau in 0.05f64..1.5,
        x in 0.05f64..20.0,
    ) {
        let u = UtilitySpec::power(g).unwrap();
        let sol = solve_merton(&u, lam, tau, MertonMethod::DualQuadrature).unwrap();
        let exact = power_point(g, lam, tau, x);
        prop_assert!(rel(sol.value(0.0, x), exact.value) < 1e-8);
    }

    #[test]
    fn mixture_merton_value_is_increasing_concave(
        lam in 0.05f64..1.0,
        t in 0.0f64..0.95,
        x in 0.01f64..100.0,
    ) {
        let u = UtilitySpec::mixture(&[1.0, 2.0], &[0.3, 0.7]).unwrap();
        let sol = solve_merton(&u, lam, 1.0, MertonMethod::DualQuadrature).unwrap();
        let p = sol.eval(t, x);
        prop_assert!(p.m_x > 0.0);
        prop_assert!(p.m_xx < 0.0);
        prop_assert!(p.value >= u.value(x) * (1.0 - 1e-12));
    }

    #[test]
    fn cholesky_reproduces_correlations(
        a in -0.95f64..0.95,
        b in -0.95f64..0.95,
        c in -0.95f64..0.95,
    ) {
        let m = [[1.0, a, b], [a, 1.0, c], [b, c, 1.0]];
        match Correlations::new(a, b, c) {
            Ok(corr) => {
                let l = corr.cholesky();
                for i in 0..3 {
                    for j in 0..3 {
                        let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                        prop_assert!((v - m[i][j]).abs() < 1e-12);
                    }
                }
            }
            Err(_) => {
                let det = 1.0 - a * a - b * b - c * c + 2.0 * a * b * c;
                prop_assert!(det <= 0.0);
            }
        }
    }

    #[test]
    fn synthetic_orders_are_recovered(p in 0.2f64..3.0, c in 0.01f64..10.0) {
        let h = [0.8, 0.4, 0.2, 0.1, 0.05];
        let e: Vec<f64> = h.iter().map(|v: &f64| c * v.powf(p)).collect();
        let se: Vec<f64> = e.iter().map(|v| 0.1 * v).collect();
        let fit = log_log_fit(&h, &e, &se).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corrections_vanish_at_horizon_and_with_scales(
        x in 0.1f64..10.0,
        z in -1.0f64..1.0,
        s in 1e-8f64..1e-6,
    ) {
        let m = model((-0.5, -0.3, 0.0), 0.1, 0.1);
        let avg = averaged_sharpe(&m, -2.0, 2.0).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let b = build_bundle(&m, &avg, &u, 1.0, MertonMethod::ClosedFormPower).unwrap();
        let at_t = b.expand(1.0, x, z);
        prop_assert_eq!(at_t.v10, 0.0);
        prop_assert_eq!(at_t.v01, 0.0);
        let tiny = b.with_scales(s, s).unwrap().expand(0.0, x, z);
        prop_assert!(rel(tiny.q, tiny.v0.value) < 1e-2);
    }

    #[test]
    fn simulation_is_deterministic_and_zero_keeps_wealth(seed in any::<u64>(), x0 in 0.1f64..5.0) {
        let m = model((-0.5, -0.3, 0.2), 0.2, 0.2);
        let avg = averaged_sharpe(&m, -2.0, 2.0).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let b = build_bundle(&m, &avg, &u, 0.5, MertonMethod::ClosedFormPower).unwrap();
        let cfg = SimConfig {
            paths: 32,
            dt: 0.01,
            horizon: 0.5,
            x0,
            y0: 0.3,
            z0: 0.1,
            s0: 1.0,
            seed,
            antithetic: true,
            control_variate: true,
            diagnostics: true,
            floor: FloorBehavior::Absorb,
        };
        let zero = simulate_paths(&m, &Strategy::Zero, &b, &cfg).unwrap();
        prop_assert!(zero.records.iter().all(|r| r.x_t == x0));
        let s = Strategy::scaled(Strategy::PiZero, 1.5);
        let a = simulate_paths(&m, &s, &b, &cfg).unwrap();
        let again = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| simulate_paths(&m, &s, &b, &cfg).unwrap());
        prop_assert_eq!(a.records, again.records);
    }
}

//! Self-checking suite over the library invariants, run on one config.

use serde::Serialize;

use super::config::RunConfig;
use super::fit::log_log_fit;
use super::studies::Verdict;
use crate::factors::Correlations;
use crate::merton::{power_point, residual_of_pde, solve_merton_with, MertonMethod};
use crate::simulate::{simulate_paths, summarize, NoiseGenerator, Strategy};
use crate::utility::logspace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantRow {
    pub name: String,
    /// Worst case observed.
    pub measured: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Default)]
struct Rows(Vec<InvariantRow>);

impl Rows {
    /// PASS iff `measured ≤ tolerance`.
    fn at_most(&mut self, name: &str, measured: f64, tolerance: f64, note: &str) {
        let ok = measured <= tolerance;
        self.push(name, measured, tolerance, ok, note);
    }

    /// PASS iff `measured < tolerance`.
    fn below(&mut self, name: &str, measured: f64, tolerance: f64, note: &str) {
        let ok = measured < tolerance;
        self.push(name, measured, tolerance, ok, note);
    }

    fn push(&mut self, name: &str, measured: f64, tolerance: f64, ok: bool, note: &str) {
        self.0.push(InvariantRow {
            name: name.into(),
            measured,
            tolerance,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            note: note.into(),
        });
    }

    fn error(&mut self, name: &str, err: impl std::fmt::Display) {
        self.push(name, f64::NAN, 0.0, false, &err.to_string());
    }
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    // NaN propagates so that a failed evaluation cannot pass
    it.into_iter()
        .fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Runs every check and returns one row per invariant.
pub fn invariant_suite(cfg: &RunConfig) -> Vec<InvariantRow> {
    let mut rows = Rows::default();

    let bad = Correlations {
        rho1: 0.9,
        rho2: 0.9,
        rho12: -0.9,
    };
    rows.push(
        "correlation_determinant_rejection",
        bad.determinant(),
        0.0,
        Correlations::new(0.9, 0.9, -0.9).is_err() && bad.determinant() < 0.0,
        "(0.9, 0.9, -0.9) must be rejected",
    );

    let hs = [1.6, 0.8, 0.4, 0.2, 0.1];
    let fit_err = max_of([0.5, 1.0, 2.0].map(|p: f64| {
        let e: Vec<f64> = hs.iter().map(|h: &f64| 0.7 * h.powf(p)).collect();
        let se: Vec<f64> = e.iter().map(|v| 0.05 * v).collect();
        log_log_fit(&hs, &e, &se).map_or(f64::NAN, |f| (f.slope - p).abs())
    }));
    rows.at_most("slope_fit_recovery", fit_err, 1e-10, "synthetic c·h^p, p ∈ {0.5, 1, 2}");

    let u = match cfg.utility_spec() {
        Ok(u) => u,
        Err(e) => {
            rows.error("utility_construction", e);
            return rows.0;
        }
    };
    let xs = logspace(1e-3, 1e3, 121);
    rows.below(
        "utility_increasing_concave",
        max_of(xs.iter().map(|&x| (-u.marginal(x)).max(u.second(x)))),
        0.0,
        "max over x of max(-U', U'')",
    );
    rows.at_most(
        "utility_inverse_marginal",
        max_of(xs.iter().map(|&x| (u.inverse_marginal(u.marginal(x)) - x).abs() / x)),
        1e-10,
        "relative error of I(U'(x))",
    );

    let mut models = Vec::new();
    for (e, d) in cfg.grid.points() {
        match cfg.model(e, d) {
            Ok(m) => models.push(m),
            Err(err) => {
                rows.error("model_construction", err);
                return rows.0;
            }
        }
    }
    rows.push(
        "model_construction",
        cfg.model.correlations.determinant(),
        0.0,
        true,
        "correlation determinant",
    );

    let bundle = match cfg.bundle() {
        Ok(b) => b,
        Err(e) => {
            rows.error("bundle_construction", e);
            return rows.0;
        }
    };
    let sim = &cfg.simulation;
    let horizon = sim.horizon;
    let lam = bundle.averages().lambda_bar(sim.z0);
    let method = match cfg.solver.method {
        MertonMethod::FiniteDifference => MertonMethod::DualQuadrature,
        m => m,
    };
    let times = [0.0, 0.5 * horizon, 0.9 * horizon];
    let wx = logspace(0.05, 20.0, 41);
    match solve_merton_with(&u, lam, horizon, method, &cfg.solver.settings) {
        Ok(sol) => {
            let pts: Vec<_> = times
                .iter()
                .flat_map(|&t| wx.iter().map(move |&x| (t, x)))
                .collect();
            rows.below(
                "merton_increasing_concave",
                max_of(pts.iter().map(|&(t, x)| {
                    let p = sol.eval(t, x);
                    (-p.m_x).max(p.m_xx)
                })),
                0.0,
                "max of max(-M_x, M_xx) at λ̄(z0)",
            );
            rows.at_most(
                "merton_terminal_condition",
                max_of(wx.iter().map(|&x| (sol.value(horizon, x) - u.value(x)).abs() / u.value(x))),
                1e-12,
                "|M(T,x) - U(x)|/U(x)",
            );
            rows.at_most(
                "merton_pde_residual",
                max_of(pts.iter().map(|&(t, x)| {
                    residual_of_pde(&sol, t, x).abs() / sol.value(t, x).abs().max(1.0)
                })),
                1e-6,
                "relative residual of M_t - ½λ²M_x²/M_xx",
            );
            rows.at_most(
                "risk_tolerance_at_zero",
                max_of(times.iter().map(|&t| sol.risk_tolerance(t, 1e-10))),
                1e-8,
                "R(t, 1e-10)",
            );
            let (lo, hi) = ratio_bounds(&u);
            rows.at_most(
                "risk_tolerance_linear_bounds",
                max_of(pts.iter().map(|&(t, x)| {
                    let r = sol.risk_tolerance(t, x) / x;
                    (lo - r).max(r - hi).max(0.0)
                })),
                1e-8,
                "R/x outside [1/(1-γ_min), 1/(1-γ_max)]",
            );
            if let Some(g) = u.power_exponent() {
                let k = g / (1.0 - g);
                let err = max_of(pts.iter().map(|&(t, x)| {
                    let p = power_point(g, lam, horizon - t, x);
                    let m = p.value.abs();
                    ((p.d1() - k * p.value).abs() / m)
                        .max((p.d2() + k * p.value).abs() / m)
                        .max((p.d1_squared() - k * k * p.value).abs() / m)
                }));
                rows.at_most("dk_power_identities", err, 1e-12, "D₁M = kM, D₂M = -kM, D₁²M = k²M");
            }
        }
        Err(e) => rows.error("merton_solve", e),
    }

    match solve_merton_with(&u, 0.0, horizon, method, &cfg.solver.settings) {
        Ok(sol) => rows.at_most(
            "merton_zero_sharpe",
            max_of(times.iter().flat_map(|&t| {
                let sol = &sol;
                let u = &u;
                wx.iter().map(move |&x| (sol.value(t, x) - u.value(x)).abs() / u.value(x))
            })),
            1e-12,
            "λ = 0 leaves M = U",
        ),
        Err(e) => rows.error("merton_zero_sharpe", e),
    }

    if let Some(g) = u.power_exponent() {
        let err = max_of([0.2, 0.5, 1.0].iter().flat_map(|&l| {
            let u = &u;
            wx.iter().map(move |&x| {
                let exact = power_point(g, l, horizon, x).value;
                solve_merton_with(u, l, horizon, MertonMethod::DualQuadrature, &Default::default())
                    .map_or(f64::NAN, |s| (s.value(0.0, x) - exact).abs() / exact)
            })
        }));
        rows.at_most("dual_vs_closed_form", err, 1e-6, "relative error, power utility");
    }

    let vg_tol = if u.power_exponent().is_some() { 1e-6 } else { 1e-3 };
    let vg = max_of([0.25, 1.0, 4.0].iter().map(|&x| {
        bundle
            .vega_gamma_check(0.0, x, sim.z0, 1e-3)
            .unwrap_or(f64::NAN)
    }));
    rows.at_most("vega_gamma_relation", vg, vg_tol, "|∂_z v⁰ - τλ̄λ̄'D₁v⁰|/(1+|v⁰|)");

    let terminal = max_of(cfg.grid.points().into_iter().flat_map(|(e, d)| {
        let b = bundle.with_scales(e, d).ok();
        wx.iter()
            .map(move |&x| {
                b.as_ref()
                    .map_or(f64::NAN, |b| b.fast_correction(horizon, x, sim.z0).abs() + b.slow_correction(horizon, x, sim.z0).abs())
            })
            .collect::<Vec<_>>()
    }));
    rows.at_most("corrections_vanish_at_horizon", terminal, 0.0, "|v¹⁰(T)| + |v⁰¹(T)|");

    let avg = bundle.averages();
    let (zlo, zhi) = cfg.z_range();
    let cache_err = max_of((0..=16).map(|i| {
        let z = zlo + (zhi - zlo) * i as f64 / 16.0;
        let (c, d) = (avg.at(z), avg.direct(z));
        [
            (c.lambda_bar, d.lambda_bar),
            (c.lambda_hat, d.lambda_hat),
            (c.lambda_bar * c.lambda_bar_prime, d.lambda_bar * d.lambda_bar_prime),
            (c.b, d.b),
        ]
        .iter()
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
    }));
    rows.at_most("averages_cache_accuracy", cache_err, 1e-7, "cached vs direct λ̄, λ̂, λ̄λ̄', B");

    match avg.poisson(sim.z0) {
        Ok(sol) => {
            let (lo, hi) = models[0].fast.support();
            let c = models[0].fast.center();
            let w = 0.15 * (hi - lo);
            let res = max_of((0..=20).map(|i| sol.generator_residual(c - w + 2.0 * w * i as f64 / 20.0).abs()));
            rows.at_most("poisson_generator_residual", res, 1e-6, "|L₀θ - (λ² - λ̄²)| near the center");
            let mean = models[0]
                .fast
                .averaging_rule()
                .iter()
                .map(|(y, w)| w * sol.theta(*y))
                .sum::<f64>();
            rows.at_most("poisson_centering", mean.abs(), 1e-8, "|⟨θ⟩|");
        }
        Err(e) => rows.error("poisson_solve", e),
    }

    rows.at_most(
        "pi_zero_at_zero_wealth",
        bundle.pi_zero(0.0, 0.0, sim.y0, sim.z0).abs(),
        0.0,
        "π⁰(t, 0, y, z)",
    );

    simulation_rows(cfg, &bundle, &models, &mut rows);
    rows.0
}

/// `R/x` lies between `1/(1-γ_min)` and `1/(1-γ_max)` for a power mixture.
fn ratio_bounds(u: &crate::utility::UtilitySpec) -> (f64, f64) {
    let exps = match u.kind() {
        crate::utility::UtilityKind::Power { gamma } => vec![*gamma],
        crate::utility::UtilityKind::PowerMixture { exponents, .. } => exponents.clone(),
    };
    let lo = exps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (1.0 / (1.0 - lo) * (1.0 - 1e-9), 1.0 / (1.0 - hi) * (1.0 + 1e-9))
}

fn simulation_rows(
    cfg: &RunConfig,
    bundle: &crate::asymptotics::ExpansionBundle,
    models: &[crate::factors::MarketModel],
    rows: &mut Rows,
) {
    let (e, d) = cfg.grid.points()[0];
    let model = &models[0];
    let mut sc = cfg.sim_config(e, d, false);
    sc.paths = 512;
    match simulate_paths(model, &Strategy::Zero, bundle, &sc) {
        Ok(ens) => rows.at_most(
            "sim_zero_strategy",
            max_of(ens.records.iter().map(|r| (r.x_t - sc.x0).abs())),
            0.0,
            "|X_T - x0| under the zero strategy",
        ),
        Err(err) => rows.error("sim_zero_strategy", err),
    }

    let n = 100_000usize;
    let mut g = NoiseGenerator::new(&Correlations::new(0.0, 0.0, 0.0).unwrap(), sc.seed, 0);
    let mut s = [0.0f64; 3];
    for _ in 0..n {
        let v = g.next_normals();
        s[0] += v[0] * v[1];
        s[1] += v[0] * v[2];
        s[2] += v[1] * v[2];
    }
    rows.at_most(
        "sim_increment_independence",
        max_of(s.iter().map(|v| (v / n as f64).abs())),
        3.0 / (n as f64).sqrt(),
        "sample correlations with ρ = 0",
    );

    let strat = Strategy::scaled(Strategy::PiZero, 0.7);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
            .and_then(|p| p.install(|| simulate_paths(model, &strat, bundle, &sc).ok()))
    };
    let mismatches = match (run(1), run(3)) {
        (Some(a), Some(b)) => a
            .records
            .iter()
            .zip(&b.records)
            .filter(|(x, y)| x != y)
            .count() as f64,
        _ => f64::NAN,
    };
    rows.at_most("sim_determinism", mismatches, 0.0, "records differing between 1 and 3 workers");

    // an over-levered strategy hits the floor often enough to test absorption
    let lever = Strategy::scaled(Strategy::PiZero, 20.0);
    match simulate_paths(model, &lever, bundle, &sc) {
        Ok(ens) => {
            let hits: Vec<_> = ens.records.iter().filter(|r| r.floor_hit).collect();
            let worst = max_of(hits.iter().map(|r| r.x_t.abs() + r.utility.abs()));
            rows.at_most(
                "sim_absorption",
                if hits.is_empty() { f64::NAN } else { worst },
                0.0,
                &format!("X_T and U(X_T) on {} absorbed paths", hits.len()),
            );
        }
        Err(err) => rows.error("sim_absorption", err),
    }

    let mut weak = cfg.sim_config(e, d, false);
    weak.paths = cfg.simulation.paths.clamp(2, 20_000) & !1;
    let coarse = simulate_paths(model, &Strategy::PiZero, bundle, &weak).map(|x| summarize(&x));
    weak.dt *= 0.5;
    let fine = simulate_paths(model, &Strategy::PiZero, bundle, &weak).map(|x| summarize(&x));
    match (coarse, fine) {
        (Ok(a), Ok(b)) => {
            let combined = (a.se * a.se + b.se * b.se).sqrt();
            rows.below(
                "sim_step_halving",
                (a.mean - b.mean).abs(),
                2.0 * combined,
                "value change when Δt is halved, against 2 combined SE",
            );
        }
        (Err(err), _) | (_, Err(err)) => rows.error("sim_step_halving", err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::embedded;

    #[test]
    fn default_config_passes() {
        let cfg = RunConfig::from_toml(embedded("default").unwrap()).unwrap();
        let rows = invariant_suite(&cfg);
        for r in &rows {
            assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        }
    }

    #[test]
    fn corrupted_correlation_fails_model_row() {
        let mut cfg = RunConfig::from_toml(embedded("default").unwrap()).unwrap();
        cfg.model.correlations = Correlations {
            rho1: 0.9,
            rho2: 0.9,
            rho12: -0.9,
        };
        let rows = invariant_suite(&cfg);
        let row = rows.iter().find(|r| r.name == "model_construction").unwrap();
        assert_eq!(row.verdict, Verdict::Fail);
    }
}

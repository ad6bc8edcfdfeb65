//! Residual-order and optimality studies over the `(ε, δ)` grid.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::RunConfig;
use super::fit::{log_log_fit, SlopeFit};
use crate::asymptotics::ExpansionBundle;
use crate::error::{Error, Result};
use crate::factors::MarketModel;
use crate::simulate::{
    mean_and_se, nhat_diagnostic, ntilde_diagnostic, samples, simulate_paths, summarize,
    MonotonicityVerdict, PathEnsemble, Strategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Unresolved,
    Fail,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pass => "PASS",
            Self::Unresolved => "UNRESOLVED",
            Self::Fail => "FAIL",
        }
    }

    /// The worse of two verdicts.
    pub fn and(self, other: Self) -> Self {
        self.max(other)
    }
}

/// One grid point: the model and the expansion at `(ε, δ)`.
#[derive(Debug, Clone)]
pub struct Cell {
    pub epsilon: f64,
    pub delta: f64,
    pub model: MarketModel,
    pub bundle: ExpansionBundle,
}

/// `π⁰` samples at one grid point.
#[derive(Debug, Clone)]
struct BaseRun {
    samples: Vec<f64>,
    mean: f64,
    se: f64,
}

/// Shared state of a study run. Each cell's `π⁰` ensemble is simulated once
/// and reused by both studies.
pub struct Harness<'a> {
    cfg: &'a RunConfig,
    cells: Vec<Cell>,
    base: BTreeMap<usize, BaseRun>,
}

impl<'a> Harness<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self> {
        let bundle = cfg.bundle()?;
        let cells = cfg
            .grid
            .points()
            .into_iter()
            .map(|(epsilon, delta)| {
                Ok(Cell {
                    epsilon,
                    delta,
                    model: cfg.model(epsilon, delta)?,
                    bundle: bundle.with_scales(epsilon, delta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            cells,
            base: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    fn run(&self, i: usize, strategy: &Strategy, diagnostics: bool) -> Result<PathEnsemble> {
        let c = &self.cells[i];
        let mut sc = self
            .cfg
            .sim_config(c.epsilon, c.delta, self.cfg.simulation.control_variate);
        sc.diagnostics = diagnostics;
        simulate_paths(&c.model, strategy, &c.bundle, &sc)
    }

    fn base_run(&mut self, i: usize) -> Result<&BaseRun> {
        if !self.base.contains_key(&i) {
            let c = &self.cells[i];
            log::info!("simulating π⁰ at ε = {}, δ = {}", c.epsilon, c.delta);
            let ens = self.run(i, &Strategy::PiZero, false)?;
            let s = samples(&ens);
            let (mean, se) = mean_and_se(&s);
            self.base.insert(i, BaseRun { samples: s, mean, se });
        }
        Ok(&self.base[&i])
    }

    pub fn residual_study(&mut self) -> Result<ResidualReport> {
        residual_order_study(self)
    }

    pub fn optimality_study(&mut self) -> Result<OptimalityReport> {
        optimality_study(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub epsilon: f64,
    pub delta: f64,
    pub v0: f64,
    pub q: f64,
    pub v_hat: f64,
    pub se: f64,
    pub residual: f64,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub scenario: String,
    pub rows: Vec<ResidualRow>,
    pub fit: Option<SlopeFit>,
    pub slope_band: [f64; 2],
    pub verdict: Verdict,
}

/// `Ê = V̂^{π⁰} - Q` at every grid point and the log-log slope of `|Ê|`
/// against `ε + δ`.
pub fn residual_order_study(h: &mut Harness<'_>) -> Result<ResidualReport> {
    let ray: Vec<&Cell> = h.cells.iter().filter(|c| c.epsilon == c.delta).collect();
    let mut distinct: Vec<f64> = ray.iter().map(|c| c.epsilon).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Config(
            "residual study needs at least 3 distinct grid points with δ = ε".into(),
        ));
    }
    let tol = h.cfg.tolerances.clone();
    let s = &h.cfg.simulation;
    let (t0, x0, z0) = (0.0, s.x0, s.z0);
    let mut rows = Vec::new();
    for i in 0..h.cells.len() {
        let (epsilon, delta) = (h.cells[i].epsilon, h.cells[i].delta);
        let point = h.cells[i].bundle.expand(t0, x0, z0);
        let base = h.base_run(i)?;
        let residual = base.mean - point.q;
        rows.push(ResidualRow {
            epsilon,
            delta,
            v0: point.v0.value,
            q: point.q,
            v_hat: base.mean,
            se: base.se,
            residual,
            resolved: residual.abs() > tol.resolution * base.se,
        });
    }
    let scale: Vec<f64> = rows.iter().map(|r| r.epsilon + r.delta).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.residual).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.se).collect();
    let fit = if e.iter().all(|v| *v != 0.0 && v.is_finite()) {
        log_log_fit(&scale, &e, &se).ok()
    } else {
        None
    };
    let verdict = if rows.iter().any(|r| !r.resolved) {
        Verdict::Unresolved
    } else {
        match fit {
            Some(f) if f.slope >= tol.slope_band[0] && f.slope <= tol.slope_band[1] => Verdict::Pass,
            _ => Verdict::Fail,
        }
    };
    Ok(ResidualReport {
        scenario: h.cfg.name.clone(),
        rows,
        fit,
        slope_band: tol.slope_band,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityRow {
    pub epsilon: f64,
    pub delta: f64,
    pub challenger: String,
    pub v_hat: f64,
    pub se: f64,
    pub v_pi_zero: f64,
    pub ell_hat: f64,
    pub ell_se: f64,
    pub verdict: Verdict,
    pub floor_hit_rate: f64,
    /// Only for perturbations of `π⁰`.
    pub ntilde: Option<MonotonicityVerdict>,
    pub nhat: Option<MonotonicityVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChallengerSummary {
    pub challenger: String,
    pub bounded: bool,
    pub trend_ok: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub scenario: String,
    pub rows: Vec<OptimalityRow>,
    pub challengers: Vec<ChallengerSummary>,
    pub verdict: Verdict,
}

fn is_pi_zero_perturbation(s: &Strategy) -> bool {
    matches!(s, Strategy::Perturbed { base, .. } if matches!(**base, Strategy::PiZero))
}

/// `ℓ̂ = (Ṽ - V̂^{π⁰})/(√ε + √δ)` for every challenger at every grid point.
/// Challengers share random numbers with `π⁰`, so `ℓ̂` is estimated from
/// paired differences.
pub fn optimality_study(h: &mut Harness<'_>) -> Result<OptimalityReport> {
    let roster = h.cfg.strategies.clone();
    let has = |f: &dyn Fn(&Strategy) -> bool| roster.iter().any(|s| f(&s.strategy));
    if !(has(&|s| matches!(s, Strategy::PiZero))
        && has(&is_pi_zero_perturbation)
        && has(&|s| !matches!(s, Strategy::PiZero) && !is_pi_zero_perturbation(s)))
    {
        return Err(Error::Config(
            "optimality roster needs pi_zero, a perturbation of pi_zero, and another challenger"
                .into(),
        ));
    }
    let z = h.cfg.tolerances.optimality;
    let mut rows = Vec::new();
    for i in 0..h.cells.len() {
        let (epsilon, delta) = (h.cells[i].epsilon, h.cells[i].delta);
        let norm = epsilon.sqrt() + delta.sqrt();
        let base = h.base_run(i)?.clone();
        for named in &roster {
            let row = if matches!(named.strategy, Strategy::PiZero) {
                OptimalityRow {
                    epsilon,
                    delta,
                    challenger: named.name.clone(),
                    v_hat: base.mean,
                    se: base.se,
                    v_pi_zero: base.mean,
                    ell_hat: 0.0,
                    ell_se: 0.0,
                    verdict: Verdict::Pass,
                    floor_hit_rate: 0.0,
                    ntilde: None,
                    nhat: None,
                }
            } else {
                log::info!("simulating {} at ε = {epsilon}, δ = {delta}", named.name);
                let ens = h.run(i, &named.strategy, true)?;
                let est = summarize(&ens);
                let diff: Vec<f64> = samples(&ens)
                    .iter()
                    .zip(&base.samples)
                    .map(|(a, b)| a - b)
                    .collect();
                let (d, d_se) = mean_and_se(&diff);
                let (ell_hat, ell_se) = (d / norm, d_se / norm);
                OptimalityRow {
                    epsilon,
                    delta,
                    challenger: named.name.clone(),
                    v_hat: est.mean,
                    se: est.se,
                    v_pi_zero: base.mean,
                    ell_hat,
                    ell_se,
                    verdict: if ell_hat <= z * ell_se {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    },
                    floor_hit_rate: est.floor_hit_rate,
                    ntilde: ntilde_diagnostic(&ens).ok(),
                    nhat: nhat_diagnostic(&ens).ok(),
                }
            };
            rows.push(row);
        }
    }

    let trend = h.cfg.tolerances.trend;
    let mut challengers = Vec::new();
    for named in &roster {
        let mut mine: Vec<&OptimalityRow> =
            rows.iter().filter(|r| r.challenger == named.name).collect();
        mine.sort_by(|a, b| (b.epsilon + b.delta).total_cmp(&(a.epsilon + a.delta)));
        let bounded = mine.iter().all(|r| r.verdict == Verdict::Pass);
        // toward smaller scales ℓ̂ may not rise beyond noise plus a relative slack
        let trend_ok = mine.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            let noise = z * (a.ell_se.powi(2) + b.ell_se.powi(2)).sqrt();
            b.ell_hat - a.ell_hat <= noise + trend * a.ell_hat.abs().max(b.ell_hat.abs())
        });
        let signs_ok = mine.iter().all(|r| {
            r.ntilde.is_none_or(|v| v.pass) && r.nhat.is_none_or(|v| v.pass)
        });
        challengers.push(ChallengerSummary {
            challenger: named.name.clone(),
            bounded,
            trend_ok,
            verdict: if bounded && trend_ok && signs_ok {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
        });
    }
    let verdict = challengers
        .iter()
        .fold(Verdict::Pass, |acc, c| acc.and(c.verdict));
    Ok(OptimalityReport {
        scenario: h.cfg.name.clone(),
        rows,
        challengers,
        verdict,
    })
}

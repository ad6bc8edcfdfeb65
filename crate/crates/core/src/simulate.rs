//! Monte Carlo engine for `(S, Y, Z, X^π)`.
//!
//! `X` and `Z` use Euler steps, `Y` uses the fast factor's transition
//! (exact for OU). Every path pair owns a ChaCha substream keyed by its
//! index, results are collected in index order and summed pairwise, so
//! output does not depend on the number of worker threads.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::ExpansionBundle;
use crate::error::{Error, Result};
use crate::factors::{Correlations, MarketModel, Transition};
use crate::quadrature::pairwise_sum;

/// Observable state at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub s: f64,
}

/// An adapted functional of the current state.
#[derive(Clone)]
pub struct PathFn(pub Arc<dyn Fn(&PathState) -> f64 + Send + Sync>);

impl fmt::Debug for PathFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PathFn(<closure>)")
    }
}

/// Perturbation process added to a base strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bump {
    Zero,
    Constant {
        value: f64,
    },
    /// `scale·min(1 + |Y|, X)`
    FastDefault {
        scale: f64,
    },
    /// `scale·R(t, X; λ̄(Z))`
    SlowDefault {
        scale: f64,
    },
    #[serde(skip)]
    Custom(PathFn),
}

impl Bump {
    fn eval(&self, st: &PathState, risk_tolerance: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { value } => *value,
            Self::FastDefault { scale } => scale * (1.0 + st.y.abs()).min(st.x),
            Self::SlowDefault { scale } => scale * risk_tolerance,
            Self::Custom(f) => (f.0)(st),
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => *value == 0.0,
            Self::FastDefault { scale } | Self::SlowDefault { scale } => *scale == 0.0,
            Self::Custom(_) => false,
        }
    }
}

/// A trading strategy, expressed as the dollar amount held in the risky asset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    PiZero,
    /// `base + ε^α·fast + δ^β·slow`
    Perturbed {
        base: Box<Strategy>,
        fast_bump: Bump,
        slow_bump: Bump,
        alpha: f64,
        beta: f64,
    },
    Scaled {
        base: Box<Strategy>,
        factor: f64,
    },
    Zero,
}

impl Strategy {
    pub fn perturbed(base: Strategy, fast_bump: Bump, slow_bump: Bump, alpha: f64, beta: f64) -> Self {
        Self::Perturbed {
            base: Box::new(base),
            fast_bump,
            slow_bump,
            alpha,
            beta,
        }
    }

    pub fn scaled(base: Strategy, factor: f64) -> Self {
        Self::Scaled {
            base: Box::new(base),
            factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::PiZero | Self::Zero => Ok(()),
            Self::Perturbed {
                base, alpha, beta, ..
            } => {
                if !(*alpha > 0.0 && *beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return Err(Error::Strategy(format!(
                        "perturbation powers must be positive, got α = {alpha}, β = {beta}"
                    )));
                }
                base.validate()
            }
            Self::Scaled { base, factor } => {
                if !factor.is_finite() {
                    return Err(Error::Strategy(format!("scale factor {factor} is not finite")));
                }
                base.validate()
            }
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            Self::PiZero => "pi_zero".into(),
            Self::Zero => "zero".into(),
            Self::Scaled { base, factor } => format!("scaled({},{factor})", base.label()),
            Self::Perturbed {
                base, alpha, beta, ..
            } => format!("perturbed({},{alpha},{beta})", base.label()),
        }
    }

    fn compile(&self, eps: f64, delta: f64) -> Compiled {
        match self {
            Self::PiZero => Compiled::PiZero,
            Self::Zero => Compiled::Zero,
            Self::Scaled { base, factor } => {
                Compiled::Scaled(Box::new(base.compile(eps, delta)), *factor)
            }
            Self::Perturbed {
                base,
                fast_bump,
                slow_bump,
                alpha,
                beta,
            } => Compiled::Perturbed {
                base: Box::new(base.compile(eps, delta)),
                fast: fast_bump.clone(),
                slow: slow_bump.clone(),
                fast_weight: eps.powf(*alpha),
                slow_weight: delta.powf(*beta),
            },
        }
    }
}

#[derive(Debug, Clone)]
enum Compiled {
    PiZero,
    Zero,
    Scaled(Box<Compiled>, f64),
    Perturbed {
        base: Box<Compiled>,
        fast: Bump,
        slow: Bump,
        fast_weight: f64,
        slow_weight: f64,
    },
}

impl Compiled {
    fn position(&self, st: &PathState, pi0: f64, r: f64) -> f64 {
        match self {
            Self::PiZero => pi0,
            Self::Zero => 0.0,
            Self::Scaled(base, f) => f * base.position(st, pi0, r),
            Self::Perturbed {
                base,
                fast,
                slow,
                fast_weight,
                slow_weight,
            } => base.position(st, pi0, r) + self.bump_sum(st, r, fast, slow, *fast_weight, *slow_weight),
        }
    }

    fn bump_sum(&self, st: &PathState, r: f64, fast: &Bump, slow: &Bump, fw: f64, sw: f64) -> f64 {
        let mut w = 0.0;
        if !fast.is_zero() {
            w += fw * fast.eval(st, r);
        }
        if !slow.is_zero() {
            w += sw * slow.eval(st, r);
        }
        w
    }

    /// `ε^α π̃¹⁰ + δ^β π̃⁰¹` when the strategy is a perturbation of `π⁰`.
    fn perturbation(&self, st: &PathState, r: f64) -> Option<f64> {
        match self {
            Self::Perturbed {
                base,
                fast,
                slow,
                fast_weight,
                slow_weight,
            } if matches!(**base, Self::PiZero) => {
                Some(self.bump_sum(st, r, fast, slow, *fast_weight, *slow_weight))
            }
            _ => None,
        }
    }
}

/// Wealth-floor behavior. Only absorption is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FloorBehavior {
    #[default]
    Absorb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Total number of paths; even when antithetic.
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
    #[serde(default = "one")]
    pub s0: f64,
    pub seed: u64,
    #[serde(default = "yes")]
    pub antithetic: bool,
    #[serde(default)]
    pub control_variate: bool,
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default)]
    pub floor: FloorBehavior,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl SimConfig {
    /// Checks the config against the time scales of `model`.
    pub fn validate(&self, model: &MarketModel) -> Result<()> {
        let bad = |m: String| Err(Error::SimConfig(m));
        if self.paths == 0 || (self.antithetic && (self.paths < 2 || self.paths % 2 != 0)) {
            return bad(format!(
                "{} paths; antithetic runs need an even count of at least 2",
                self.paths
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon {} is not positive", self.horizon));
        }
        let limit = model.epsilon().min(model.delta()) / 20.0;
        if !(self.dt > 0.0 && self.dt <= limit * (1.0 + 1e-12)) {
            return bad(format!(
                "dt = {} exceeds min(ε, δ)/20 = {limit}",
                self.dt
            ));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return bad(format!("x0 = {} is not positive", self.x0));
        }
        if !(self.y0.is_finite() && self.z0.is_finite() && self.s0 > 0.0) {
            return bad("initial factor values must be finite and s0 positive".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Correlated Brownian increments `(ΔW, ΔW^Y, ΔW^Z)` from one substream.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    rng: ChaCha8Rng,
    chol: [[f64; 3]; 3],
}

impl NoiseGenerator {
    pub fn new(correlations: &Correlations, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            chol: correlations.cholesky(),
        }
    }

    /// Unit-variance correlated normals.
    #[inline]
    pub fn next_normals(&mut self) -> [f64; 3] {
        let a: f64 = self.rng.sample(StandardNormal);
        let b: f64 = self.rng.sample(StandardNormal);
        let c: f64 = self.rng.sample(StandardNormal);
        let l = &self.chol;
        [a, l[1][0] * a + l[1][1] * b, l[2][0] * a + l[2][1] * b + l[2][2] * c]
    }
}

/// Terminal record of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRecord {
    pub x_t: f64,
    pub utility: f64,
    pub floor_hit: bool,
    /// Discrete Itô sum of the control martingale; zero when disabled.
    pub control: f64,
    pub ntilde: f64,
    pub nhat: f64,
    /// Increments with the wrong sign (`> 0`).
    pub ntilde_positive: u32,
    pub nhat_positive: u32,
    /// Increments that should be strictly negative but are not.
    pub ntilde_not_strict: u32,
    pub nhat_not_strict: u32,
    pub failed: bool,
}

/// Paths in index order. Antithetic partners are adjacent.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub records: Vec<PathRecord>,
    pub antithetic: bool,
    pub control_variate: bool,
    pub diagnostics: bool,
    /// Whether `Ñ` applies: the strategy perturbs `π⁰`.
    pub perturbs_pi_zero: bool,
    pub steps: usize,
}

struct Engine<'a> {
    model: &'a MarketModel,
    bundle: &'a ExpansionBundle,
    strategy: Compiled,
    cfg: &'a SimConfig,
    chol: Correlations,
    transition: Transition,
    dt: f64,
    steps: usize,
    gamma: Option<f64>,
    sqrt_eps: f64,
    sqrt_delta: f64,
}

#[derive(Clone, Copy)]
struct Live {
    st: PathState,
    rec: PathRecord,
}

impl Engine<'_> {
    fn fresh(&self) -> Live {
        Live {
            st: PathState {
                t: 0.0,
                x: self.cfg.x0,
                y: self.cfg.y0,
                z: self.cfg.z0,
                s: self.cfg.s0,
            },
            rec: PathRecord {
                x_t: self.cfg.x0,
                utility: 0.0,
                floor_hit: false,
                control: 0.0,
                ntilde: 0.0,
                nhat: 0.0,
                ntilde_positive: 0,
                nhat_positive: 0,
                ntilde_not_strict: 0,
                nhat_not_strict: 0,
                failed: false,
            },
        }
    }

    /// Advances one path by one step with unit normals `xi`.
    #[inline]
    fn step(&self, p: &mut Live, xi: [f64; 3]) {
        if p.rec.failed {
            return;
        }
        let dt = self.dt;
        let sq = dt.sqrt();
        let (dw, dwz) = (sq * xi[0], sq * xi[2]);
        let st = p.st;
        let m = self.model;
        let lam = m.lambda(st.y, st.z);
        let sig = m.sigma(st.y, st.z);
        let gz = m.slow_vol.eval(st.z);

        if st.x > 0.0 {
            let need_point = self.cfg.control_variate
                || self.cfg.diagnostics
                || (self.gamma.is_none() && !matches!(self.strategy, Compiled::Zero));
            let tau = self.bundle.horizon() - st.t;
            let (avg, slopes) = if need_point {
                let (a, s) = self.bundle.averages().at_with_slopes(st.z);
                (Some(a), Some(s))
            } else {
                (None, None)
            };
            let point = avg.map(|a| self.bundle.merton_point(st.t, st.x, a.lambda_bar));
            let r = match (self.gamma, point) {
                (Some(g), _) => st.x / (1.0 - g),
                (None, Some(pt)) => pt.risk_tolerance,
                // only the zero strategy runs without R
                (None, None) => 0.0,
            };
            let pi0 = if lam == 0.0 { 0.0 } else { lam / sig * r };
            let pi = self.strategy.position(&st, pi0, r);

            if let (Some(a), Some(s), Some(v0)) = (avg, slopes, point) {
                if self.cfg.control_variate {
                    let (qx, qz) = self.q_gradient(st.t, tau, st.z, &a, &s, &v0);
                    p.rec.control += qx * pi * sig * dw + self.sqrt_delta * gz * qz * dwz;
                }
                if self.cfg.diagnostics {
                    let scale = 0.5 * sig * sig * v0.m_xx * dt;
                    if let Some(w) = self.strategy.perturbation(&st, r) {
                        let inc = w * w * scale;
                        p.rec.ntilde += inc;
                        p.rec.ntilde_positive += (inc > 0.0) as u32;
                        p.rec.ntilde_not_strict += (w != 0.0 && !(inc < 0.0)) as u32;
                    }
                    let w = pi - pi0;
                    let inc = w * w * scale;
                    p.rec.nhat += inc;
                    p.rec.nhat_positive += (inc > 0.0) as u32;
                    p.rec.nhat_not_strict += (w != 0.0 && !(inc < 0.0)) as u32;
                }
            }

            // self-financing update: dX = π(μ dt + σ dW)
            let x_new = st.x + pi * (lam * sig * dt + sig * dw);
            if !x_new.is_finite() {
                p.rec.failed = true;
                return;
            }
            if x_new <= 0.0 {
                p.st.x = 0.0;
                p.rec.floor_hit = true;
            } else {
                p.st.x = x_new;
            }
        }

        p.st.s = st.s * ((lam * sig - 0.5 * sig * sig) * dt + sig * dw).exp();
        p.st.y = match self.transition {
            Transition::Linear {
                level,
                decay,
                scale,
            } => level + decay * (st.y - level) + scale * xi[1],
            Transition::Euler { h } => {
                st.y + m.fast.drift(st.y) * h + m.fast.diffusion(st.y) * h.sqrt() * xi[1]
            }
        };
        p.st.z = st.z + m.delta() * m.slow_drift.eval(st.z) * dt + self.sqrt_delta * gz * dwz;
        p.st.t = st.t + dt;
        if !(p.st.y.is_finite() && p.st.z.is_finite() && p.st.s.is_finite()) {
            p.rec.failed = true;
        }
    }

    /// `(Q_x, Q_z)` at `(t, x, z)`. Exact for power utility; otherwise the
    /// leading-order gradient, which keeps the control mean-zero.
    fn q_gradient(
        &self,
        t: f64,
        tau: f64,
        z: f64,
        a: &crate::factors::AveragePoint,
        s: &crate::factors::AverageSlopes,
        v0: &crate::merton::MertonPoint,
    ) -> (f64, f64) {
        // ∂_z v⁰ = τλ̄λ̄' D₁v⁰
        let half = a.lambda_bar * a.lambda_bar_prime;
        let v0_z = tau * half * v0.d1();
        let Some(g) = self.gamma else {
            return (v0.m_x, v0_z);
        };
        let k2 = (g / (1.0 - g)).powi(2);
        let (c10, c01) = self.bundle.correction_coefficients(t, a, z);
        let factor = 1.0 + k2 * (self.sqrt_eps * c10 + self.sqrt_delta * c01);
        let c = self.model.correlations();
        let gz = self.model.slow_vol.eval(z);
        let (gp, _) = self.model.slow_vol.derivatives(z);
        let c10_z = -0.5 * tau * c.rho1 * s.b;
        let c01_z = 0.5
            * tau
            * tau
            * c.rho2
            * (s.lambda_hat * half * gz + a.lambda_hat * s.half_slope * gz + a.lambda_hat * half * gp);
        let factor_z = k2 * (self.sqrt_eps * c10_z + self.sqrt_delta * c01_z);
        (v0.m_x * factor, v0_z * factor + v0.value * factor_z)
    }

    fn finish(&self, mut p: Live) -> PathRecord {
        p.rec.x_t = p.st.x;
        p.rec.utility = self.bundle.utility().value(p.st.x);
        if !p.rec.utility.is_finite() || !p.rec.control.is_finite() {
            p.rec.failed = true;
        }
        p.rec
    }

    fn run_pair(&self, index: u64) -> [PathRecord; 2] {
        let mut noise = NoiseGenerator::new(&self.chol, self.cfg.seed, index);
        let mut a = self.fresh();
        let mut b = self.fresh();
        for _ in 0..self.steps {
            let xi = noise.next_normals();
            self.step(&mut a, xi);
            self.step(&mut b, [-xi[0], -xi[1], -xi[2]]);
        }
        [self.finish(a), self.finish(b)]
    }

    fn run_single(&self, index: u64) -> PathRecord {
        let mut noise = NoiseGenerator::new(&self.chol, self.cfg.seed, index);
        let mut a = self.fresh();
        for _ in 0..self.steps {
            let xi = noise.next_normals();
            self.step(&mut a, xi);
        }
        self.finish(a)
    }
}

/// Simulates `cfg.paths` paths of the market under `strategy`.
pub fn simulate_paths(
    model: &MarketModel,
    strategy: &Strategy,
    bundle: &ExpansionBundle,
    cfg: &SimConfig,
) -> Result<PathEnsemble> {
    model.correlations().validate()?;
    cfg.validate(model)?;
    strategy.validate()?;
    let bm = bundle.model();
    if bm.epsilon() != model.epsilon() || bm.delta() != model.delta() {
        return Err(Error::SimConfig(
            "bundle and model were built for different (ε, δ)".into(),
        ));
    }
    if (cfg.control_variate || cfg.diagnostics) && bundle.averages().cached_range().is_none() {
        log::warn!("averages are uncached; every step recomputes them directly");
    }
    let steps = cfg.steps();
    let dt = cfg.horizon / steps as f64;
    let engine = Engine {
        model,
        bundle,
        strategy: strategy.compile(model.epsilon(), model.delta()),
        cfg,
        chol: model.correlations(),
        transition: model.fast.transition(dt / model.epsilon()),
        dt,
        steps,
        gamma: match bundle.method() {
            crate::merton::MertonMethod::ClosedFormPower => bundle.utility().power_exponent(),
            _ => None,
        },
        sqrt_eps: model.epsilon().sqrt(),
        sqrt_delta: model.delta().sqrt(),
    };
    let records: Vec<PathRecord> = if cfg.antithetic {
        (0..cfg.paths / 2)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| engine.run_pair(i as u64))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    } else {
        (0..cfg.paths)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| engine.run_single(i as u64))
            .collect()
    };
    let failures: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.failed)
        .map(|(i, _)| i)
        .collect();
    if let Some(&first) = failures.first() {
        return Err(Error::PathFailure {
            count: failures.len(),
            first,
        });
    }
    Ok(PathEnsemble {
        records,
        antithetic: cfg.antithetic,
        control_variate: cfg.control_variate,
        diagnostics: cfg.diagnostics,
        perturbs_pi_zero: engine.strategy.perturbation(
            &PathState {
                t: 0.0,
                x: cfg.x0,
                y: cfg.y0,
                z: cfg.z0,
                s: cfg.s0,
            },
            0.0,
        )
        .is_some(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub se: f64,
    pub paths: usize,
    /// Number of independent samples behind `se` (pairs when antithetic).
    pub effective_n: usize,
    pub floor_hits: usize,
    pub floor_hit_rate: f64,
    pub control_variate: bool,
    /// `E[X_T^k]` for `k = 1..4`.
    pub wealth_moments: [f64; 4],
}

/// Per-sample values `U(X_T) - control`, one per independent unit.
pub fn samples(ens: &PathEnsemble) -> Vec<f64> {
    let f = |r: &PathRecord| r.utility - r.control;
    if ens.antithetic {
        ens.records
            .chunks_exact(2)
            .map(|p| 0.5 * (f(&p[0]) + f(&p[1])))
            .collect()
    } else {
        ens.records.iter().map(f).collect()
    }
}

/// Mean and standard error of i.i.d. samples.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn summarize(ens: &PathEnsemble) -> ValueEstimate {
    let s = samples(ens);
    let (mean, se) = mean_and_se(&s);
    let floor_hits = ens.records.iter().filter(|r| r.floor_hit).count();
    let n = ens.records.len();
    let mut wealth_moments = [0.0; 4];
    for (k, m) in wealth_moments.iter_mut().enumerate() {
        let v: Vec<f64> = ens.records.iter().map(|r| r.x_t.powi(k as i32 + 1)).collect();
        *m = pairwise_sum(&v) / n as f64;
    }
    if wealth_moments.iter().any(|m| !m.is_finite()) {
        log::warn!("terminal wealth moments are not finite: {wealth_moments:?}");
    } else {
        log::debug!("terminal wealth moments E[X^1..4] = {wealth_moments:?}");
    }
    ValueEstimate {
        mean,
        se,
        paths: n,
        effective_n: s.len(),
        floor_hits,
        floor_hit_rate: floor_hits as f64 / n as f64,
        control_variate: ens.control_variate,
        wealth_moments,
    }
}

/// `E[U(X_T)]` with standard error.
pub fn estimate_value(
    model: &MarketModel,
    strategy: &Strategy,
    bundle: &ExpansionBundle,
    cfg: &SimConfig,
) -> Result<ValueEstimate> {
    Ok(summarize(&simulate_paths(model, strategy, bundle, cfg)?))
}

/// Outcome of a per-path sign test on a monotone term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MonotonicityVerdict {
    pub pass: bool,
    pub paths: usize,
    /// Paths with at least one positive increment.
    pub paths_with_positive: usize,
    /// Paths with a non-negative increment where the weight was nonzero.
    pub paths_not_strict: usize,
}

fn verdict<F: Fn(&PathRecord) -> (u32, u32)>(ens: &PathEnsemble, f: F) -> MonotonicityVerdict {
    let mut pos = 0;
    let mut weak = 0;
    for r in &ens.records {
        let (p, w) = f(r);
        pos += (p > 0) as usize;
        weak += (w > 0) as usize;
    }
    MonotonicityVerdict {
        pass: pos == 0 && weak == 0,
        paths: ens.records.len(),
        paths_with_positive: pos,
        paths_not_strict: weak,
    }
}

/// Sign test on `dÑ = ½(ε^α π̃¹⁰ + δ^β π̃⁰¹)² σ² v⁰_xx dt`.
pub fn ntilde_diagnostic(ens: &PathEnsemble) -> Result<MonotonicityVerdict> {
    if !ens.diagnostics {
        return Err(Error::Strategy("ensemble was simulated without diagnostics".into()));
    }
    if !ens.perturbs_pi_zero {
        return Err(Error::Strategy(
            "Ñ applies only to perturbations of π⁰; use the N̂ test".into(),
        ));
    }
    Ok(verdict(ens, |r| (r.ntilde_positive, r.ntilde_not_strict)))
}

/// Sign test on `dN̂ = ½(π - π⁰)² σ² v⁰_xx dt`.
pub fn nhat_diagnostic(ens: &PathEnsemble) -> Result<MonotonicityVerdict> {
    if !ens.diagnostics {
        return Err(Error::Strategy("ensemble was simulated without diagnostics".into()));
    }
    Ok(verdict(ens, |r| (r.nhat_positive, r.nhat_not_strict)))
}

pub const PATH_CSV_HEADER: &str = "path,x_t,utility,floor_hit";

/// Streams per-path terminal records.
pub fn write_path_csv<W: Write>(ens: &PathEnsemble, mut out: W) -> Result<()> {
    writeln!(out, "{PATH_CSV_HEADER}")?;
    for (i, r) in ens.records.iter().enumerate() {
        writeln!(out, "{i},{:e},{:e},{}", r.x_t, r.utility, r.floor_hit as u8)?;
    }
    Ok(())
}

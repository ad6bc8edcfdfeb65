//! Constant-Sharpe-ratio Merton problem for a general utility.
//!
//! `M_t - ½λ² M_x² / M_xx = 0` with `M(T, ·) = U`. Three solvers share one
//! evaluation surface:
//!
//! * `ClosedFormPower`: `M = x^γ/γ · exp(½λ²γ/(1-γ) τ)`.
//! * `DualQuadrature`: the conjugate `Ṽ(t,y)` solves the linear heat-type
//!   equation `Ṽ_t + ½λ²y²Ṽ_yy = 0`, so it is an expectation against a
//!   lognormal kernel and Gauss–Hermite quadrature evaluates it at any point.
//! * `FiniteDifference`: implicit scheme in log-wealth with Newton per step.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{richardson_derivative, GaussHermite};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MertonMethod {
    ClosedFormPower,
    DualQuadrature,
    FiniteDifference,
}

/// Numerical parameters of the non-closed-form solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub quadrature_nodes: usize,
    pub fd_nodes: usize,
    pub fd_steps: usize,
    pub fd_x_min: f64,
    pub fd_x_max: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            quadrature_nodes: 96,
            fd_nodes: 800,
            fd_steps: 400,
            fd_x_min: 1e-3,
            fd_x_max: 1e3,
        }
    }
}

/// Value and wealth derivatives of `M` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonPoint {
    pub value: f64,
    pub m_x: f64,
    pub m_xx: f64,
    pub m_xxx: f64,
    /// `R = -M_x / M_xx`
    pub risk_tolerance: f64,
    /// `∂_x R`
    pub risk_tolerance_x: f64,
}

impl MertonPoint {
    /// `D₁M = R M_x`.
    pub fn d1(&self) -> f64 {
        self.risk_tolerance * self.m_x
    }

    /// `D₂M = R² M_xx`.
    pub fn d2(&self) -> f64 {
        self.risk_tolerance * self.risk_tolerance * self.m_xx
    }

    /// `D₁(D₁M) = R (R_x M_x + R M_xx)`.
    pub fn d1_squared(&self) -> f64 {
        let r = self.risk_tolerance;
        r * (self.risk_tolerance_x * self.m_x + r * self.m_xx)
    }
}

#[derive(Debug, Clone)]
enum Solver {
    Terminal,
    Power { gamma: f64 },
    Dual { rule: Arc<GaussHermite> },
    Grid(Arc<FdGrid>),
}

/// An evaluable solution of the Merton PDE. Immutable; evaluation is
/// reentrant.
#[derive(Debug, Clone)]
pub struct MertonSolution {
    utility: UtilitySpec,
    sharpe: f64,
    horizon: f64,
    method: MertonMethod,
    solver: Solver,
}

pub fn solve_merton(
    utility: &UtilitySpec,
    sharpe: f64,
    horizon: f64,
    method: MertonMethod,
) -> Result<MertonSolution> {
    solve_merton_with(utility, sharpe, horizon, method, &SolverSettings::default())
}

pub fn solve_merton_with(
    utility: &UtilitySpec,
    sharpe: f64,
    horizon: f64,
    method: MertonMethod,
    settings: &SolverSettings,
) -> Result<MertonSolution> {
    if !(sharpe.is_finite() && sharpe >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "sharpe",
            reason: format!("{sharpe} is not a nonnegative number"),
        });
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter {
            name: "horizon",
            reason: format!("{horizon} is not positive"),
        });
    }
    let gamma = utility.power_exponent();
    if method == MertonMethod::ClosedFormPower && gamma.is_none() {
        return Err(Error::InvalidParameter {
            name: "method",
            reason: "closed form requires a pure power utility".into(),
        });
    }
    let solver = if sharpe == 0.0 {
        Solver::Terminal
    } else {
        match method {
            MertonMethod::ClosedFormPower => Solver::Power {
                gamma: gamma.unwrap_or_default(),
            },
            MertonMethod::DualQuadrature => {
                if settings.quadrature_nodes < 2 {
                    return Err(Error::InvalidParameter {
                        name: "quadrature_nodes",
                        reason: "need at least two nodes".into(),
                    });
                }
                Solver::Dual {
                    rule: hermite_rule(settings.quadrature_nodes),
                }
            }
            MertonMethod::FiniteDifference => {
                Solver::Grid(Arc::new(FdGrid::solve(utility, sharpe, horizon, settings)?))
            }
        }
    };
    Ok(MertonSolution {
        utility: utility.clone(),
        sharpe,
        horizon,
        method,
        solver,
    })
}

/// Rules are shared between solutions with the same node count.
fn hermite_rule(n: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(n)
        .or_insert_with(|| Arc::new(GaussHermite::new(n)))
        .clone()
}

impl MertonSolution {
    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn sharpe(&self) -> f64 {
        self.sharpe
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn method(&self) -> MertonMethod {
        self.method
    }

    /// Full evaluation at `(t, x)`, `x > 0`. Times before zero are valid for
    /// the mesh-free solvers; the grid solver clamps to its domain.
    pub fn eval(&self, t: f64, x: f64) -> MertonPoint {
        debug_assert!(x > 0.0);
        let tau = (self.horizon - t).max(0.0);
        if tau == 0.0 {
            return self.terminal_point(x);
        }
        match &self.solver {
            Solver::Terminal => self.terminal_point(x),
            Solver::Power { gamma } => power_point(*gamma, self.sharpe, tau, x),
            Solver::Dual { rule } => self.dual_point(rule, tau, x),
            Solver::Grid(grid) => grid.eval(t, x),
        }
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return self.utility.value(0.0);
        }
        self.eval(t, x).value
    }

    /// `R(t, x; λ)`; zero at `x = 0`.
    pub fn risk_tolerance(&self, t: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if let Solver::Power { gamma } = self.solver {
            return x / (1.0 - gamma);
        }
        self.eval(t, x).risk_tolerance
    }

    /// `∂_x^k M` for `k ≤ 4`. Orders up to three are analytic for the
    /// mesh-free solvers; order four differentiates order three.
    pub fn x_derivative(&self, t: f64, x: f64, k: u32) -> f64 {
        if let (Solver::Power { gamma }, true) = (&self.solver, t < self.horizon) {
            let e = (0.5 * self.sharpe.powi(2) * gamma / (1.0 - gamma) * (self.horizon - t)).exp();
            return power_derivative(*gamma, x, k) * e;
        }
        let tau = self.horizon - t;
        if tau <= 0.0 || matches!(self.solver, Solver::Terminal) {
            if let Some(g) = self.utility.power_exponent() {
                return power_derivative(g, x, k);
            }
            return match k {
                0 => self.utility.value(x),
                1 => self.utility.marginal(x),
                2 => self.utility.second(x),
                3 => self.utility.third(x),
                _ => richardson_derivative(|s| self.utility.third(s), x, 1e-3 * x),
            };
        }
        let p = self.eval(t, x);
        match k {
            0 => p.value,
            1 => p.m_x,
            2 => p.m_xx,
            3 => p.m_xxx,
            _ => richardson_derivative(|s| self.eval(t, s).m_xxx, x, 1e-3 * x),
        }
    }

    /// Time derivative `M_t` by a Richardson-extrapolated central difference.
    pub fn time_derivative(&self, t: f64, x: f64) -> f64 {
        let tau = self.horizon - t;
        let h = 1e-3 * tau.max(1e-6);
        richardson_derivative(|s| self.value(s, x), t, h)
    }

    fn terminal_point(&self, x: f64) -> MertonPoint {
        let u = &self.utility;
        let (m_x, m_xx, m_xxx) = (u.marginal(x), u.second(x), u.third(x));
        MertonPoint {
            value: u.value(x),
            m_x,
            m_xx,
            m_xxx,
            risk_tolerance: -m_x / m_xx,
            risk_tolerance_x: -1.0 + m_x * m_xxx / (m_xx * m_xx),
        }
    }

    /// Dual moments `(Ṽ, Ṽ_y, Ṽ_yy, Ṽ_yyy)` at `y`. With `H` the lognormal
    /// kernel: `Ṽ_y = -E[I(yH)H]`, `Ṽ_yy = E[H²/(-U''(I))]`,
    /// `Ṽ_yyy = E[H³ U'''(I)/U''(I)³]`.
    fn dual_moments(&self, rule: &GaussHermite, tau: f64, y: f64, full: bool) -> [f64; 4] {
        let lam = self.sharpe;
        let drift = -0.5 * lam * lam * tau;
        let vol = lam * tau.sqrt();
        let u = &self.utility;
        let mut acc = [0.0; 4];
        for (&xi, &w) in rule.nodes().iter().zip(rule.weights()) {
            let h = (drift + vol * xi).exp();
            let z = y * h;
            let inv = u.inverse_marginal(z);
            let upp = u.second(inv);
            acc[1] -= w * inv * h;
            acc[2] -= w * h * h / upp;
            if full {
                acc[0] += w * (u.value(inv) - z * inv);
                acc[3] += w * h * h * h * u.third(inv) / (upp * upp * upp);
            }
        }
        acc
    }

    /// Solves `x = -Ṽ_y(y)` for `y` by Newton in `ln y` inside a bracket.
    fn dual_root(&self, rule: &GaussHermite, tau: f64, x: f64) -> f64 {
        let target = x.ln();
        // g(u) = ln(-Ṽ_y(e^u)) - ln x, strictly decreasing
        let g = |u: f64| {
            let m = self.dual_moments(rule, tau, u.exp(), false);
            let phi = -m[1];
            (phi.ln() - target, -u.exp() * m[2] / phi)
        };
        let mut u = self.utility.marginal(x).ln();
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..200 {
            let (gu, slope) = g(u);
            let bracketed = lo.is_finite() && hi.is_finite();
            if !(gu.is_finite() && slope < 0.0) {
                if !bracketed {
                    break;
                }
                u = 0.5 * (lo + hi);
                continue;
            }
            if gu == 0.0 {
                return u.exp();
            }
            if gu > 0.0 {
                lo = lo.max(u);
            } else {
                hi = hi.min(u);
            }
            let step = gu / slope;
            // converged on the step before any safeguard can cycle
            if step.abs() <= 1e-14 * u.abs().max(1.0) {
                return (u - step).exp();
            }
            let next = u - step.clamp(-2.0, 2.0);
            u = if next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
        }
        u.exp()
    }

    fn dual_point(&self, rule: &GaussHermite, tau: f64, x: f64) -> MertonPoint {
        let y = self.dual_root(rule, tau, x);
        let [v, _, vyy, vyyy] = self.dual_moments(rule, tau, y, true);
        MertonPoint {
            value: v + x * y,
            m_x: y,
            m_xx: -1.0 / vyy,
            m_xxx: -vyyy / (vyy * vyy * vyy),
            risk_tolerance: y * vyy,
            risk_tolerance_x: -1.0 - y * vyyy / vyy,
        }
    }

    /// `-Ṽ_y(t, y)`; the dual first-order condition says this equals `x`
    /// at `y = M_x(t, x)`.
    pub fn dual_wealth(&self, t: f64, y: f64) -> Option<f64> {
        let tau = self.horizon - t;
        match &self.solver {
            Solver::Dual { rule } if tau > 0.0 => Some(-self.dual_moments(rule, tau, y, false)[1]),
            _ => None,
        }
    }
}

/// Closed-form power-utility point at time-to-horizon `tau`.
pub fn power_point(gamma: f64, lam: f64, tau: f64, x: f64) -> MertonPoint {
    let e = (0.5 * lam * lam * gamma / (1.0 - gamma) * tau).exp();
    let xg = x.powf(gamma);
    MertonPoint {
        value: xg / gamma * e,
        m_x: xg / x * e,
        m_xx: (gamma - 1.0) * xg / (x * x) * e,
        m_xxx: (gamma - 1.0) * (gamma - 2.0) * xg / (x * x * x) * e,
        risk_tolerance: x / (1.0 - gamma),
        risk_tolerance_x: 1.0 / (1.0 - gamma),
    }
}

/// `∂_x^k (x^γ/γ)`.
fn power_derivative(gamma: f64, x: f64, k: u32) -> f64 {
    let mut c = 1.0 / gamma;
    for j in 0..k {
        c *= gamma - j as f64;
    }
    c * x.powf(gamma - k as f64)
}

/// `(t, x) ↦ R^k ∂_x^k f(t, x)`. `f(t, x, j)` must return `∂_x^j f`.
pub fn apply_dk<'a, F>(
    sol: &'a MertonSolution,
    k: u32,
    f: F,
) -> Result<impl Fn(f64, f64) -> f64 + 'a>
where
    F: Fn(f64, f64, u32) -> f64 + 'a,
{
    if !(1..=4).contains(&k) {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("{k} outside 1..=4"),
        });
    }
    Ok(move |t: f64, x: f64| sol.risk_tolerance(t, x).powi(k as i32) * f(t, x, k))
}

/// `π★ = (λ/σ) R(t, x; λ)`.
pub fn merton_strategy(sol: &MertonSolution, t: f64, x: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            reason: format!("{sigma} is not positive"),
        });
    }
    Ok(sol.sharpe / sigma * sol.risk_tolerance(t, x))
}

/// `M_t + ½λ²D₂M + λ²D₁M` with a numerical time derivative.
pub fn residual_of_pde(sol: &MertonSolution, t: f64, x: f64) -> f64 {
    let p = sol.eval(t, x);
    let lam2 = sol.sharpe * sol.sharpe;
    sol.time_derivative(t, x) + 0.5 * lam2 * p.d2() + lam2 * p.d1()
}

/// Backward-in-time implicit solution on a uniform grid in `s = ln x`.
#[derive(Debug)]
struct FdGrid {
    s0: f64,
    ds: f64,
    dt: f64,
    /// `levels[n]` holds `M(n·dt, ·)`.
    levels: Vec<Vec<f64>>,
}

impl FdGrid {
    fn solve(u: &UtilitySpec, lam: f64, horizon: f64, cfg: &SolverSettings) -> Result<Self> {
        let n = cfg.fd_nodes;
        if n < 8 || cfg.fd_steps == 0 || !(cfg.fd_x_min > 0.0 && cfg.fd_x_max > cfg.fd_x_min) {
            return Err(Error::InvalidParameter {
                name: "fd grid",
                reason: format!("{cfg:?}"),
            });
        }
        let s0 = cfg.fd_x_min.ln();
        let ds = (cfg.fd_x_max.ln() - s0) / (n - 1) as f64;
        let dt = horizon / cfg.fd_steps as f64;
        let c = 0.5 * lam * lam * dt;
        let x_of = |j: usize| (s0 + ds * j as f64).exp();

        let terminal: Vec<f64> = (0..n).map(|j| u.value(x_of(j))).collect();
        let mut levels = vec![Vec::new(); cfg.fd_steps + 1];
        levels[cfg.fd_steps] = terminal;

        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];

        for step in (0..cfg.fd_steps).rev() {
            let t = step as f64 * dt;
            let prev = &levels[step + 1];
            // concavity ratio M_ss/M_s at the top, lagged one level
            let kappa = {
                let j = n - 2;
                let p = (prev[j + 1] - prev[j - 1]) / (2.0 * ds);
                let q = (prev[j + 1] - 2.0 * prev[j] + prev[j - 1]) / (ds * ds);
                q / p
            };
            if !(kappa < 1.0) {
                return Err(Error::ConcavityLost { t, x: x_of(n - 1) });
            }
            let mut m = prev.clone();
            let mut converged = false;
            for _ in 0..50 {
                diag[0] = 1.0;
                upper[0] = 0.0;
                rhs[0] = -(m[0] - prev[0]);
                for j in 1..n - 1 {
                    let p = (m[j + 1] - m[j - 1]) / (2.0 * ds);
                    let q = (m[j + 1] - 2.0 * m[j] + m[j - 1]) / (ds * ds);
                    let d = p - q;
                    if !(d > 0.0) {
                        return Err(Error::ConcavityLost { t, x: x_of(j) });
                    }
                    let f = p * p / d;
                    let fp = p * (p - 2.0 * q) / (d * d);
                    let fq = p * p / (d * d);
                    rhs[j] = -(m[j] - c * f - prev[j]);
                    lower[j] = -c * (-fp / (2.0 * ds) + fq / (ds * ds));
                    diag[j] = 1.0 + c * 2.0 * fq / (ds * ds);
                    upper[j] = -c * (fp / (2.0 * ds) + fq / (ds * ds));
                }
                let j = n - 1;
                let b = c / ((1.0 - kappa) * ds);
                rhs[j] = -(m[j] - b * (m[j] - m[j - 1]) - prev[j]);
                lower[j] = b;
                diag[j] = 1.0 - b;
                let delta = thomas(&lower, &diag, &upper, &mut rhs);
                let mut worst: f64 = 0.0;
                for (mj, dj) in m.iter_mut().zip(delta.iter()) {
                    *mj += dj;
                    worst = worst.max(dj.abs() / mj.abs().max(1.0));
                }
                if worst <= 1e-13 {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NewtonStalled { iterations: 50, t });
            }
            levels[step] = m;
        }
        Ok(Self { s0, ds, dt, levels })
    }

    /// `(M, M_s, M_ss, M_sss)` at one time level by local cubic interpolation.
    fn level_eval(&self, level: usize, s: f64) -> [f64; 4] {
        let f = &self.levels[level];
        let n = f.len();
        let r = (s - self.s0) / self.ds;
        let i0 = (r.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let u = r - i0 as f64;
        let v = [f[i0], f[i0 + 1], f[i0 + 2], f[i0 + 3]];
        // Newton divided differences on nodes 0..3
        let d1 = [v[1] - v[0], v[2] - v[1], v[3] - v[2]];
        let d2 = [(d1[1] - d1[0]) / 2.0, (d1[2] - d1[1]) / 2.0];
        let d3 = (d2[1] - d2[0]) / 3.0;
        // p(u) = v0 + d1₀ u + d2₀ u(u-1) + d3 u(u-1)(u-2)
        let val = v[0] + d1[0] * u + d2[0] * u * (u - 1.0) + d3 * u * (u - 1.0) * (u - 2.0);
        let der = d1[0] + d2[0] * (2.0 * u - 1.0) + d3 * (3.0 * u * u - 6.0 * u + 2.0);
        let der2 = 2.0 * d2[0] + d3 * (6.0 * u - 6.0);
        let der3 = 6.0 * d3;
        let h = self.ds;
        [val, der / h, der2 / (h * h), der3 / (h * h * h)]
    }

    fn eval(&self, t: f64, x: f64) -> MertonPoint {
        let last = self.levels.len() - 1;
        let s_max = self.s0 + self.ds * (self.levels[0].len() - 1) as f64;
        let s = x.ln().clamp(self.s0, s_max);
        let x = s.exp();
        let r = (t / self.dt).clamp(0.0, last as f64);
        let n0 = (r.floor() as usize).min(last - 1);
        let w = r - n0 as f64;
        let a = self.level_eval(n0, s);
        let b = self.level_eval(n0 + 1, s);
        let m: Vec<f64> = (0..4).map(|i| (1.0 - w) * a[i] + w * b[i]).collect();
        let (ms, mss, msss) = (m[1], m[2], m[3]);
        let m_x = ms / x;
        let m_xx = (mss - ms) / (x * x);
        let m_xxx = (msss - 3.0 * mss + 2.0 * ms) / (x * x * x);
        MertonPoint {
            value: m[0],
            m_x,
            m_xx,
            m_xxx,
            risk_tolerance: -m_x / m_xx,
            risk_tolerance_x: -1.0 + m_x * m_xxx / (m_xx * m_xx),
        }
    }
}

/// Solves a tridiagonal system in place; `rhs` is overwritten.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    let mut x = rhs.to_vec();
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::logspace;

    fn power(g: f64) -> UtilitySpec {
        UtilitySpec::power(g).unwrap()
    }

    fn mixture() -> UtilitySpec {
        UtilitySpec::mixture(&[1.0, 1.0], &[0.5, 0.25]).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn closed_form_value() {
        let sol = solve_merton(&power(0.5), 1.0, 1.0, MertonMethod::ClosedFormPower).unwrap();
        assert!(rel(sol.value(0.0, 1.0), 2.0 * 0.5f64.exp()) < 1e-15);
        assert!((sol.value(1.0, 2.0) - power(0.5).value(2.0)).abs() < 1e-15);
        assert!((sol.risk_tolerance(0.3, 3.0) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn zero_sharpe_returns_utility() {
        let u = mixture();
        for method in [MertonMethod::DualQuadrature, MertonMethod::FiniteDifference] {
            let sol = solve_merton(&u, 0.0, 1.0, method).unwrap();
            for &x in &[0.1, 1.0, 7.0] {
                assert_eq!(sol.value(0.2, x), u.value(x));
            }
            assert_eq!(merton_strategy(&sol, 0.0, 1.0, 0.3).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let u = power(0.5);
        assert!(solve_merton(&u, -0.1, 1.0, MertonMethod::ClosedFormPower).is_err());
        assert!(solve_merton(&u, 0.1, 0.0, MertonMethod::ClosedFormPower).is_err());
        assert!(solve_merton(&mixture(), 0.1, 1.0, MertonMethod::ClosedFormPower).is_err());
        let sol = solve_merton(&u, 1.0, 1.0, MertonMethod::ClosedFormPower).unwrap();
        assert!(merton_strategy(&sol, 0.0, 1.0, 0.0).is_err());
        assert!(apply_dk(&sol, 0, |_, _, _| 1.0).is_err());
        assert!(apply_dk(&sol, 5, |_, _, _| 1.0).is_err());
    }

    #[test]
    fn strategy_examples() {
        let sol = solve_merton(&power(0.5), 1.0, 1.0, MertonMethod::ClosedFormPower).unwrap();
        assert!((merton_strategy(&sol, 0.0, 1.0, 0.5).unwrap() - 4.0).abs() < 1e-14);
        assert_eq!(merton_strategy(&sol, 0.0, 0.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn dual_matches_closed_form_for_power() {
        for &g in &[0.25, 0.5, 0.75] {
            let u = power(g);
            let exact = solve_merton(&u, 0.7, 1.0, MertonMethod::ClosedFormPower).unwrap();
            let dual = solve_merton(&u, 0.7, 1.0, MertonMethod::DualQuadrature).unwrap();
            for &x in &logspace(0.1, 10.0, 9) {
                let a = exact.eval(0.1, x);
                let b = dual.eval(0.1, x);
                assert!(rel(b.value, a.value) < 1e-10, "g={g} x={x}");
                assert!(rel(b.m_x, a.m_x) < 1e-10);
                assert!(rel(b.m_xx, a.m_xx) < 1e-9);
                assert!(rel(b.m_xxx, a.m_xxx) < 1e-8);
                assert!(rel(b.risk_tolerance_x, a.risk_tolerance_x) < 1e-8);
            }
        }
    }

    #[test]
    fn dual_first_order_condition_round_trips() {
        let sol = solve_merton(&mixture(), 0.5, 1.0, MertonMethod::DualQuadrature).unwrap();
        for &x in &logspace(0.01, 100.0, 13) {
            let y = sol.eval(0.0, x).m_x;
            let back = sol.dual_wealth(0.0, y).unwrap();
            assert!(rel(back, x) < 1e-8, "x={x} back={back}");
        }
    }

    #[test]
    fn fd_matches_closed_form_for_power() {
        let u = power(0.5);
        let exact = solve_merton(&u, 0.5, 1.0, MertonMethod::ClosedFormPower).unwrap();
        let fd = solve_merton(&u, 0.5, 1.0, MertonMethod::FiniteDifference).unwrap();
        for &t in &[0.0, 0.5, 0.9] {
            for &x in &logspace(0.1, 10.0, 7) {
                assert!(rel(fd.value(t, x), exact.value(t, x)) < 1e-4, "t={t} x={x}");
                let r = fd.risk_tolerance(t, x);
                assert!(rel(r, 2.0 * x) < 1e-3, "t={t} x={x} r={r}");
            }
        }
    }

    #[test]
    fn d_operators_on_power() {
        // D₁M = kM, D₁²M = k²M, D₂M = -kM with k = γ/(1-γ)
        let g = 0.3;
        let k = g / (1.0 - g);
        let sol = solve_merton(&power(g), 0.8, 1.0, MertonMethod::ClosedFormPower).unwrap();
        let d1 = apply_dk(&sol, 1, |t, x, j| sol.x_derivative(t, x, j)).unwrap();
        let d2 = apply_dk(&sol, 2, |t, x, j| sol.x_derivative(t, x, j)).unwrap();
        let d4 = apply_dk(&sol, 4, |t, x, j| sol.x_derivative(t, x, j)).unwrap();
        for &x in &[0.2, 1.0, 5.0] {
            let p = sol.eval(0.25, x);
            assert!(rel(d1(0.25, x), k * p.value) < 1e-12);
            assert!(rel(p.d1_squared(), k * k * p.value) < 1e-12);
            assert!(rel(d2(0.25, x), -k * p.value) < 1e-12);
            // R⁴ M_xxxx = g(g-1)(g-2)(g-3)/(1-g)⁴ x^g/g e
            let c = (g - 1.0) * (g - 2.0) * (g - 3.0) / (1.0 - g).powi(4) * g;
            assert!(rel(d4(0.25, x), c * p.value) < 1e-12);
        }
        let zero = apply_dk(&sol, 1, |_, _, j| if j == 0 { 3.0 } else { 0.0 }).unwrap();
        assert_eq!(zero(0.1, 2.0), 0.0);
    }

    #[test]
    fn pde_residual_small() {
        let u = power(0.5);
        let exact = solve_merton(&u, 1.0, 1.0, MertonMethod::ClosedFormPower).unwrap();
        let dual = solve_merton(&u, 1.0, 1.0, MertonMethod::DualQuadrature).unwrap();
        for &t in &[0.0, 0.5, 0.9] {
            for &x in &[0.3, 1.0, 4.0] {
                let m = exact.value(t, x);
                assert!((residual_of_pde(&exact, t, x) / m).abs() <= 1e-9);
                assert!((residual_of_pde(&dual, t, x) / m).abs() <= 1e-6);
            }
        }
        let flat = solve_merton(&u, 0.0, 1.0, MertonMethod::DualQuadrature).unwrap();
        assert!(residual_of_pde(&flat, 0.5, 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_terminal_risk_tolerance() {
        let sol = solve_merton(&mixture(), 0.5, 1.0, MertonMethod::DualQuadrature).unwrap();
        assert!((sol.risk_tolerance(1.0, 1.0) - 1.6).abs() < 1e-14);
    }
}

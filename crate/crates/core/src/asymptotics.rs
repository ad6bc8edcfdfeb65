//! First-order expansion of the multiscale value function.
//!
//! `v⁰ = M(t,x;λ̄(z))`, `v¹⁰ = -½τρ₁B D₁²v⁰`,
//! `v⁰¹ = ½τ²ρ₂λ̂λ̄λ̄'g D₁²v⁰`, and `Q = v⁰ + √ε v¹⁰ + √δ v⁰¹`.

use crate::error::{Error, Result};
use crate::factors::{self, AveragePoint, FactorAverages, MarketModel, PoissonSolution};
use crate::merton::{power_point, solve_merton_with, MertonMethod, MertonPoint, SolverSettings};
use crate::quadrature::richardson_derivative;
use crate::utility::UtilitySpec;

/// Everything needed to evaluate the expansion. Immutable once built.
#[derive(Debug, Clone)]
pub struct ExpansionBundle {
    model: MarketModel,
    averages: FactorAverages,
    utility: UtilitySpec,
    horizon: f64,
    method: MertonMethod,
    settings: SolverSettings,
    gamma: Option<f64>,
}

/// Expansion terms at one `(t, x, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionPoint {
    pub v0: MertonPoint,
    pub averages: AveragePoint,
    pub v10: f64,
    pub v01: f64,
    pub q: f64,
}

pub fn build_bundle(
    model: &MarketModel,
    averages: &FactorAverages,
    utility: &UtilitySpec,
    horizon: f64,
    method: MertonMethod,
) -> Result<ExpansionBundle> {
    build_bundle_with(model, averages, utility, horizon, method, &SolverSettings::default())
}

/// The bundle evaluates `v⁰` at a different Sharpe ratio for every `z`, so
/// only the mesh-free solvers are accepted.
pub fn build_bundle_with(
    model: &MarketModel,
    averages: &FactorAverages,
    utility: &UtilitySpec,
    horizon: f64,
    method: MertonMethod,
    settings: &SolverSettings,
) -> Result<ExpansionBundle> {
    if method == MertonMethod::FiniteDifference {
        return Err(Error::InvalidParameter {
            name: "method",
            reason: "the expansion needs a mesh-free Merton solver".into(),
        });
    }
    let gamma = utility.power_exponent();
    if method == MertonMethod::ClosedFormPower && gamma.is_none() {
        return Err(Error::InvalidParameter {
            name: "method",
            reason: "closed form requires a pure power utility".into(),
        });
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter {
            name: "horizon",
            reason: format!("{horizon} is not positive"),
        });
    }
    Ok(ExpansionBundle {
        model: model.clone(),
        averages: averages.clone(),
        utility: utility.clone(),
        horizon,
        method,
        settings: settings.clone(),
        gamma: if method == MertonMethod::ClosedFormPower {
            gamma
        } else {
            None
        },
    })
}

impl ExpansionBundle {
    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn averages(&self) -> &FactorAverages {
        &self.averages
    }

    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn method(&self) -> MertonMethod {
        self.method
    }

    /// Same bundle at new scales `(ε, δ)`; averages do not depend on them.
    pub fn with_scales(&self, epsilon: f64, delta: f64) -> Result<Self> {
        let mut b = self.clone();
        b.model = self.model.with_scales(epsilon, delta)?;
        Ok(b)
    }

    /// `M(t, x; λ)` with all wealth derivatives.
    pub fn merton_point(&self, t: f64, x: f64, lambda: f64) -> MertonPoint {
        let tau = (self.horizon - t).max(0.0);
        match self.gamma {
            Some(g) => power_point(g, lambda, tau, x),
            None => solve_merton_with(&self.utility, lambda, self.horizon, self.method, &self.settings)
                .map(|s| s.eval(t, x))
                .unwrap_or(MertonPoint {
                    value: f64::NAN,
                    m_x: f64::NAN,
                    m_xx: f64::NAN,
                    m_xxx: f64::NAN,
                    risk_tolerance: f64::NAN,
                    risk_tolerance_x: f64::NAN,
                }),
        }
    }

    /// `R(t, x; λ̄(z))`, zero at `x = 0`.
    pub fn risk_tolerance(&self, t: f64, x: f64, z: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if let Some(g) = self.gamma {
            return x / (1.0 - g);
        }
        self.merton_point(t, x, self.averages.lambda_bar(z)).risk_tolerance
    }

    /// Coefficients `(c¹⁰, c⁰¹)` with `v¹⁰ = c¹⁰ D₁²v⁰`, `v⁰¹ = c⁰¹ D₁²v⁰`.
    pub fn correction_coefficients(&self, t: f64, a: &AveragePoint, z: f64) -> (f64, f64) {
        let tau = (self.horizon - t).max(0.0);
        let c = self.model.correlations();
        let c10 = -0.5 * tau * c.rho1 * a.b;
        let c01 = 0.5
            * tau
            * tau
            * c.rho2
            * a.lambda_hat
            * a.lambda_bar
            * a.lambda_bar_prime
            * self.model.slow_vol.eval(z);
        (c10, c01)
    }

    /// All expansion terms at `(t, x, z)`.
    pub fn expand(&self, t: f64, x: f64, z: f64) -> ExpansionPoint {
        let a = self.averages.at(z);
        self.expand_with(t, x, z, a)
    }

    pub fn expand_with(&self, t: f64, x: f64, z: f64, a: AveragePoint) -> ExpansionPoint {
        let v0 = self.merton_point(t, x, a.lambda_bar);
        let d11 = v0.d1_squared();
        let (c10, c01) = self.correction_coefficients(t, &a, z);
        // the τ factor makes both corrections vanish exactly at the horizon
        let v10 = if c10 == 0.0 { 0.0 } else { c10 * d11 };
        let v01 = if c01 == 0.0 { 0.0 } else { c01 * d11 };
        let q = v0.value + self.model.epsilon().sqrt() * v10 + self.model.delta().sqrt() * v01;
        ExpansionPoint {
            v0,
            averages: a,
            v10,
            v01,
            q,
        }
    }

    /// `v⁰(t, x, z)`
    pub fn leading_order(&self, t: f64, x: f64, z: f64) -> f64 {
        if x <= 0.0 {
            return self.utility.value(0.0);
        }
        self.merton_point(t, x, self.averages.lambda_bar(z)).value
    }

    /// `v¹⁰(t, x, z)`
    pub fn fast_correction(&self, t: f64, x: f64, z: f64) -> f64 {
        self.expand(t, x, z).v10
    }

    /// `v⁰¹(t, x, z)`
    pub fn slow_correction(&self, t: f64, x: f64, z: f64) -> f64 {
        self.expand(t, x, z).v01
    }

    /// `Q(t, x, z)`
    pub fn q(&self, t: f64, x: f64, z: f64) -> f64 {
        self.expand(t, x, z).q
    }

    /// `|∂_z v⁰ - τλ̄λ̄'D₁v⁰| / (1 + |v⁰|)`, with `∂_z v⁰` from re-solving
    /// the Merton problem at `λ̄(z ± h)`. Averages are computed directly.
    pub fn vega_gamma_check(&self, t: f64, x: f64, z: f64, h_z: f64) -> Result<f64> {
        let tau = self.horizon - t;
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter {
                name: "t",
                reason: "Vega-Gamma check needs t < T".into(),
            });
        }
        let model = &self.model;
        let lb = |s: f64| factors::sharpe_moments(model, s).map(|m| m.0);
        let lam = lb(z)?;
        let lam_prime = factors::lambda_bar_prime(model, z)?;
        let centre = self.merton_point(t, x, lam);
        let v_of = |s: f64| lb(s).map(|l| self.merton_point(t, x, l).value).unwrap_or(f64::NAN);
        let fd = richardson_derivative(v_of, z, h_z);
        let rhs = tau * lam * lam_prime * centre.d1();
        let residual = (fd - rhs).abs() / (1.0 + centre.value.abs());
        if !residual.is_finite() {
            return Err(Error::Quadrature { node: z });
        }
        Ok(residual)
    }

    /// `π⁰ = (λ(y,z)/σ(y,z)) R(t, x; λ̄(z))`.
    pub fn pi_zero(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let lam = self.model.lambda(y, z);
        if lam == 0.0 {
            return 0.0;
        }
        lam / self.model.sigma(y, z) * self.risk_tolerance(t, x, z)
    }

    /// `v^{π⁰,(2,0)} = -½θ(y,z)D₁v⁰` with zero integration constant.
    pub fn second_order_fast_diag(&self, t: f64, x: f64, y: f64, z: f64) -> Result<f64> {
        let sol = self.averages.poisson(z)?;
        Ok(self.second_order_fast_diag_with(&sol, t, x, y))
    }

    pub fn second_order_fast_diag_with(&self, sol: &PoissonSolution, t: f64, x: f64, y: f64) -> f64 {
        if sol.is_zero() || x <= 0.0 {
            return 0.0;
        }
        let z = sol.z();
        let v0 = self.merton_point(t, x, self.averages.lambda_bar(z));
        -0.5 * sol.theta(y) * v0.d1()
    }
}

//! Admissible utility functions on `(0, ∞)`.
//!
//! Every supported utility is a positive combination of power terms
//! `c_i x^{γ_i} / γ_i` with `γ_i ∈ (0, 1)`. The family is closed-form in all
//! derivatives, satisfies `U(0+) = 0`, the Inada conditions, and has
//! asymptotic elasticity `max γ_i < 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameterization of a utility as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityKind {
    Power { gamma: f64 },
    PowerMixture { weights: Vec<f64>, exponents: Vec<f64> },
}

/// A validated utility. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    kind: UtilityKind,
    weights: Vec<f64>,
    exponents: Vec<f64>,
    asymptotic_elasticity: f64,
}

pub fn make_utility(kind: UtilityKind) -> Result<UtilitySpec> {
    let (weights, exponents) = match &kind {
        UtilityKind::Power { gamma } => (vec![1.0], vec![*gamma]),
        UtilityKind::PowerMixture { weights, exponents } => {
            if weights.is_empty() {
                return Err(Error::InvalidUtility("mixture has no components".into()));
            }
            if weights.len() != exponents.len() {
                return Err(Error::InvalidUtility(format!(
                    "{} weights but {} exponents",
                    weights.len(),
                    exponents.len()
                )));
            }
            (weights.clone(), exponents.clone())
        }
    };
    for &c in &weights {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidUtility(format!(
                "mixture weight {c} is not strictly positive"
            )));
        }
    }
    for &g in &exponents {
        if !(g.is_finite() && g > 0.0 && g < 1.0) {
            return Err(Error::InvalidUtility(format!(
                "exponent {g} outside (0, 1): U(0+) must be finite and AE[U] < 1"
            )));
        }
    }
    let asymptotic_elasticity = exponents.iter().cloned().fold(f64::MIN, f64::max);
    let spec = UtilitySpec {
        kind,
        weights,
        exponents,
        asymptotic_elasticity,
    };
    for warning in spec.assumption_diagnostics() {
        log::warn!("utility assumption check: {warning}");
    }
    Ok(spec)
}

impl UtilitySpec {
    pub fn power(gamma: f64) -> Result<Self> {
        make_utility(UtilityKind::Power { gamma })
    }

    pub fn mixture(weights: &[f64], exponents: &[f64]) -> Result<Self> {
        make_utility(UtilityKind::PowerMixture {
            weights: weights.to_vec(),
            exponents: exponents.to_vec(),
        })
    }

    pub fn kind(&self) -> &UtilityKind {
        &self.kind
    }

    /// `Some(γ)` for a pure power utility.
    pub fn power_exponent(&self) -> Option<f64> {
        match self.kind {
            UtilityKind::Power { gamma } => Some(gamma),
            UtilityKind::PowerMixture { .. } => None,
        }
    }

    pub fn asymptotic_elasticity(&self) -> f64 {
        self.asymptotic_elasticity
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.weights.iter().cloned().zip(self.exponents.iter().cloned())
    }

    pub fn value(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        self.components().map(|(c, g)| c * x.powf(g) / g).sum()
    }

    pub fn marginal(&self, x: f64) -> f64 {
        self.components().map(|(c, g)| c * x.powf(g - 1.0)).sum()
    }

    pub fn second(&self, x: f64) -> f64 {
        self.components()
            .map(|(c, g)| c * (g - 1.0) * x.powf(g - 2.0))
            .sum()
    }

    pub fn third(&self, x: f64) -> f64 {
        self.components()
            .map(|(c, g)| c * (g - 1.0) * (g - 2.0) * x.powf(g - 3.0))
            .sum()
    }

    /// `R(x) = -U'(x) / U''(x)`.
    pub fn risk_tolerance(&self, x: f64) -> f64 {
        if let Some(g) = self.power_exponent() {
            return x / (1.0 - g);
        }
        // R = x Σ c x^{γ-1} / Σ c (1-γ) x^{γ-1}
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, g) in self.components() {
            let t = c * x.powf(g - 1.0);
            num += t;
            den += t * (1.0 - g);
        }
        x * num / den
    }

    /// `I(y) = (U')^{-1}(y)`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        debug_assert!(y > 0.0);
        if let Some(g) = self.power_exponent() {
            return y.powf(1.0 / (g - 1.0));
        }
        // g(s) = ln U'(e^s) - ln y is a log-sum-exp of affine maps: convex and
        // decreasing. Newton from the left of the root increases monotonically.
        let ln_y = y.ln();
        let mut s = self
            .components()
            .map(|(c, g)| (ln_y - c.ln()) / (g - 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..100 {
            let mut m = 0.0;
            let mut dm = 0.0;
            for (c, g) in self.components() {
                let t = c * ((g - 1.0) * s).exp();
                m += t;
                dm += t * (g - 1.0);
            }
            let step = (m.ln() - ln_y) * m / dm;
            s -= step;
            if !(step.abs() > 1e-15 * s.abs().max(1.0)) {
                break;
            }
        }
        s.exp()
    }

    /// `I'(y) = 1 / U''(I(y))`.
    pub fn inverse_marginal_derivative(&self, y: f64) -> f64 {
        1.0 / self.second(self.inverse_marginal(y))
    }

    /// Convex conjugate `Ũ(y) = sup_x {U(x) - xy} = U(I(y)) - y I(y)`.
    pub fn conjugate(&self, y: f64) -> f64 {
        let x = self.inverse_marginal(y);
        self.value(x) - y * x
    }

    /// Sampled checks of the standing regularity assumptions. Failures are
    /// reported, not enforced: the growth bounds are properties on
    /// non-compact sets that sampling cannot establish.
    pub fn assumption_diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let grid = logspace(1e-3, 1e3, 121);
        let mut prev_r = 0.0;
        for &x in &grid {
            let up = self.marginal(x);
            let upp = self.second(x);
            let r = self.risk_tolerance(x);
            if !(up > 0.0) {
                out.push(format!("U'({x}) = {up} is not positive"));
            }
            if !(upp < 0.0) {
                out.push(format!("U''({x}) = {upp} is not negative"));
            }
            if !(r > prev_r) {
                out.push(format!("R is not strictly increasing at x = {x}"));
            }
            prev_r = r;
            let back = self.inverse_marginal(up);
            if ((back - x) / x).abs() > 1e-10 {
                out.push(format!("I(U'({x})) = {back}"));
            }
        }
        if self.risk_tolerance(1e-12) > 1e-9 {
            out.push("R(0+) does not vanish".into());
        }
        // R' bounded and ∂^i R^i bounded for i = 2, 3 on the sampled compact
        let bound = 1e3;
        for &x in &grid {
            let h = 1e-3 * x;
            let r1 = (self.risk_tolerance(x + h) - self.risk_tolerance(x - h)) / (2.0 * h);
            let r2 = |z: f64| self.risk_tolerance(z).powi(2);
            let d2 = (r2(x + h) - 2.0 * r2(x) + r2(x - h)) / (h * h);
            if !(r1.abs() <= bound && d2.abs() <= bound) {
                out.push(format!("risk-tolerance derivative bound exceeded at x = {x}"));
                break;
            }
        }
        out
    }
}

/// `n` log-spaced points from `a` to `b` inclusive.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                b
            } else {
                (la + (lb - la) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

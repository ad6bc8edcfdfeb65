//! Multiscale market model and the ergodic averages of the fast factor.
//!
//! `Y` is fast (`dY = b/ε dt + a/√ε dW^Y`), `Z` is slow
//! (`dZ = δc dt + √δ g dW^Z`). Averages `⟨·⟩` are taken against the
//! invariant law `Φ` of the `ε`-free generator `L₀ = ½a²∂_y² + b∂_y`.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{richardson_derivative, GaussHermite, GaussLegendre, UniformCubic};

/// A user-supplied coefficient `(y, z) ↦ f(y, z)`.
#[derive(Clone)]
pub struct Field(pub Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>);

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Field(<closure>)")
    }
}

impl Field {
    pub fn new<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self(Arc::new(f))
    }
}

/// Sharpe ratio `λ(y, z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sharpe {
    Constant {
        value: f64,
    },
    /// `base + z_slope·z + y_slope·y`
    Affine {
        base: f64,
        #[serde(default)]
        z_slope: f64,
        #[serde(default)]
        y_slope: f64,
    },
    /// `base + z_slope·z + y_amp·tanh(y)`
    AffineZTanhY {
        base: f64,
        z_slope: f64,
        y_amp: f64,
    },
    /// `scale·z·y`
    ProductZY {
        scale: f64,
    },
    #[serde(skip)]
    Custom(Field),
}

impl Sharpe {
    #[inline]
    pub fn eval(&self, y: f64, z: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Affine {
                base,
                z_slope,
                y_slope,
            } => base + z_slope * z + y_slope * y,
            Self::AffineZTanhY {
                base,
                z_slope,
                y_amp,
            } => base + z_slope * z + y_amp * y.tanh(),
            Self::ProductZY { scale } => scale * z * y,
            Self::Custom(f) => (f.0)(y, z),
        }
    }

    /// True when `λ` has no `y`-dependence by construction.
    pub fn is_y_free(&self) -> bool {
        match self {
            Self::Constant { .. } => true,
            Self::Affine { y_slope, .. } => *y_slope == 0.0,
            Self::AffineZTanhY { y_amp, .. } => *y_amp == 0.0,
            Self::ProductZY { scale } => *scale == 0.0,
            Self::Custom(_) => false,
        }
    }
}

/// Volatility `σ(y, z) > 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum Volatility {
    Constant {
        value: f64,
    },
    /// `base·exp(amp·tanh(y))`
    ExpTanhY {
        base: f64,
        amp: f64,
    },
    #[serde(skip)]
    Custom(Field),
}

impl Volatility {
    #[inline]
    pub fn eval(&self, y: f64, z: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::ExpTanhY { base, amp } => base * (amp * y.tanh()).exp(),
            Self::Custom(f) => (f.0)(y, z),
        }
    }
}

/// Slow drift `c(z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowDrift {
    Constant {
        value: f64,
    },
    /// `rate·(level - z)`
    MeanReverting {
        rate: f64,
        level: f64,
    },
    #[serde(skip)]
    Custom(Field),
}

impl SlowDrift {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::MeanReverting { rate, level } => rate * (level - z),
            Self::Custom(f) => (f.0)(0.0, z),
        }
    }
}

/// Slow volatility `g(z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowVol {
    Constant {
        value: f64,
    },
    /// `base + slope·z`
    Affine {
        base: f64,
        slope: f64,
    },
    #[serde(skip)]
    Custom(Field),
}

impl SlowVol {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Affine { base, slope } => base + slope * z,
            Self::Custom(f) => (f.0)(0.0, z),
        }
    }

    /// `(g', g'')`; analytic for the registry forms.
    pub fn derivatives(&self, z: f64) -> (f64, f64) {
        match self {
            Self::Constant { .. } => (0.0, 0.0),
            Self::Affine { slope, .. } => (*slope, 0.0),
            Self::Custom(_) => {
                let h = 1e-4 * z.abs().max(1.0);
                let d1 = richardson_derivative(|s| self.eval(s), z, h);
                let d2 = crate::quadrature::richardson_second_derivative(|s| self.eval(s), z, h);
                (d1, d2)
            }
        }
    }
}

/// One step of the fast factor over `h = Δt/ε` units of its own clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transition {
    /// `y' = level + decay·(y - level) + scale·ξ`, exact in law.
    Linear { level: f64, decay: f64, scale: f64 },
    /// Euler step with `√h` noise scaling.
    Euler { h: f64 },
}

/// An ergodic fast factor with generator `L₀ = ½a²∂_y² + b∂_y`.
pub trait FastFactor: Send + Sync + fmt::Debug {
    /// `b(y)`
    fn drift(&self, y: f64) -> f64;
    /// `a(y)`
    fn diffusion(&self, y: f64) -> f64;
    /// `ln Φ(y)` up to an additive constant.
    fn log_density(&self, y: f64) -> f64;
    /// Interval carrying all but a negligible part of `Φ`.
    fn support(&self) -> (f64, f64);
    /// Interior point where the Poisson integral switches tails.
    fn center(&self) -> f64;
    /// `(node, weight)` pairs with `Σ w f(y) ≈ ⟨f⟩`.
    fn averaging_rule(&self) -> &[(f64, f64)];
    fn transition(&self, h: f64) -> Transition;
    /// True when `Φ` is a point mass.
    fn is_degenerate(&self) -> bool {
        false
    }
}

/// Ornstein–Uhlenbeck factor `b = m - y`, `a = ν√2`, `Φ = N(m, ν²)`.
#[derive(Debug, Clone)]
pub struct OrnsteinUhlenbeck {
    mean: f64,
    nu: f64,
    rule: Vec<(f64, f64)>,
}

const HERMITE_NODES: usize = 96;
const SUPPORT_SDS: f64 = 22.0;

impl OrnsteinUhlenbeck {
    pub fn new(mean: f64, nu: f64) -> Result<Self> {
        if !(mean.is_finite() && nu.is_finite() && nu >= 0.0) {
            return Err(Error::Model(format!("OU needs finite mean and ν ≥ 0, got ({mean}, {nu})")));
        }
        let rule = if nu == 0.0 {
            vec![(mean, 1.0)]
        } else {
            let gh = GaussHermite::new(HERMITE_NODES);
            gh.nodes()
                .iter()
                .zip(gh.weights())
                .map(|(&x, &w)| (mean + nu * x, w))
                .collect()
        };
        Ok(Self { mean, nu, rule })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }
}

impl FastFactor for OrnsteinUhlenbeck {
    fn drift(&self, y: f64) -> f64 {
        self.mean - y
    }

    fn diffusion(&self, _y: f64) -> f64 {
        self.nu * std::f64::consts::SQRT_2
    }

    fn log_density(&self, y: f64) -> f64 {
        let u = (y - self.mean) / self.nu;
        -0.5 * u * u
    }

    fn support(&self) -> (f64, f64) {
        (
            self.mean - SUPPORT_SDS * self.nu,
            self.mean + SUPPORT_SDS * self.nu,
        )
    }

    fn center(&self) -> f64 {
        self.mean
    }

    fn averaging_rule(&self) -> &[(f64, f64)] {
        &self.rule
    }

    fn transition(&self, h: f64) -> Transition {
        let decay = (-h).exp();
        Transition::Linear {
            level: self.mean,
            decay,
            scale: self.nu * (-(-2.0 * h).exp_m1()).sqrt(),
        }
    }

    fn is_degenerate(&self) -> bool {
        self.nu == 0.0
    }
}

/// A fast factor given by its coefficients and invariant density. Averages
/// use composite Gauss–Legendre on the support; paths use Euler steps.
pub struct DensityFactor {
    drift: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    diffusion: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    log_density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    support: (f64, f64),
    center: f64,
    rule: Vec<(f64, f64)>,
}

impl fmt::Debug for DensityFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityFactor")
            .field("support", &self.support)
            .field("center", &self.center)
            .finish_non_exhaustive()
    }
}

impl DensityFactor {
    pub fn new(
        drift: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        diffusion: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        log_density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        support: (f64, f64),
        center: f64,
    ) -> Result<Self> {
        let (lo, hi) = support;
        if !(lo < center && center < hi) {
            return Err(Error::Model("density factor center must lie inside the support".into()));
        }
        let gl = GaussLegendre::new(8);
        let panels = 400;
        let width = (hi - lo) / panels as f64;
        let mut rule = Vec::with_capacity(panels * 8);
        for k in 0..panels {
            let a = lo + width * k as f64;
            for (&x, &w) in gl.nodes().iter().zip(gl.weights()) {
                let y = a + 0.5 * width * (x + 1.0);
                rule.push((y, 0.5 * width * w * log_density(y).exp()));
            }
        }
        let mass: f64 = rule.iter().map(|p| p.1).sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Model(format!("invariant density has mass {mass}")));
        }
        for p in &mut rule {
            p.1 /= mass;
        }
        Ok(Self {
            drift,
            diffusion,
            log_density,
            support,
            center,
            rule,
        })
    }
}

impl FastFactor for DensityFactor {
    fn drift(&self, y: f64) -> f64 {
        (self.drift)(y)
    }

    fn diffusion(&self, y: f64) -> f64 {
        (self.diffusion)(y)
    }

    fn log_density(&self, y: f64) -> f64 {
        (self.log_density)(y)
    }

    fn support(&self) -> (f64, f64) {
        self.support
    }

    fn center(&self) -> f64 {
        self.center
    }

    fn averaging_rule(&self) -> &[(f64, f64)] {
        &self.rule
    }

    fn transition(&self, h: f64) -> Transition {
        Transition::Euler { h }
    }
}

/// Fast-factor section of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum FastFactorSpec {
    Ou { mean: f64, nu: f64 },
}

impl FastFactorSpec {
    pub fn build(&self) -> Result<Arc<dyn FastFactor>> {
        match self {
            Self::Ou { mean, nu } => Ok(Arc::new(OrnsteinUhlenbeck::new(*mean, *nu)?)),
        }
    }
}

/// Correlations of `(W, W^Y, W^Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correlations {
    pub rho1: f64,
    pub rho2: f64,
    pub rho12: f64,
}

impl Correlations {
    pub fn new(rho1: f64, rho2: f64, rho12: f64) -> Result<Self> {
        let c = Self { rho1, rho2, rho12 };
        c.validate()?;
        Ok(c)
    }

    /// `1 + 2ρ₁ρ₂ρ₁₂ - ρ₁² - ρ₂² - ρ₁₂²`
    pub fn determinant(&self) -> f64 {
        let (a, b, c) = (self.rho1, self.rho2, self.rho12);
        1.0 + 2.0 * a * b * c - a * a - b * b - c * c
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        let inside = [self.rho1, self.rho2, self.rho12]
            .iter()
            .all(|r| r.is_finite() && r.abs() < 1.0);
        if !inside || !(det > 0.0) {
            return Err(Error::Correlation { determinant: det });
        }
        Ok(())
    }

    /// Lower-triangular `L` with `L Lᵀ` the correlation matrix of
    /// `(W, W^Y, W^Z)`.
    pub fn cholesky(&self) -> [[f64; 3]; 3] {
        let (a, b, c) = (self.rho1, self.rho2, self.rho12);
        let l11 = (1.0 - a * a).sqrt();
        let l21 = (c - a * b) / l11;
        let l22 = (1.0 - b * b - l21 * l21).sqrt();
        [[1.0, 0.0, 0.0], [a, l11, 0.0], [b, l21, l22]]
    }
}

/// Coefficients, correlations and scales of the multiscale market.
#[derive(Debug, Clone)]
pub struct MarketModel {
    pub sharpe: Sharpe,
    pub volatility: Volatility,
    pub slow_drift: SlowDrift,
    pub slow_vol: SlowVol,
    pub fast: Arc<dyn FastFactor>,
    correlations: Correlations,
    epsilon: f64,
    delta: f64,
}

impl MarketModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sharpe: Sharpe,
        volatility: Volatility,
        slow_drift: SlowDrift,
        slow_vol: SlowVol,
        fast: Arc<dyn FastFactor>,
        correlations: Correlations,
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        correlations.validate()?;
        let model = Self {
            sharpe,
            volatility,
            slow_drift,
            slow_vol,
            fast,
            correlations,
            epsilon: 1.0,
            delta: 1.0,
        };
        let model = model.with_scales(epsilon, delta)?;
        let (lo, hi) = model.fast.support();
        let c = model.fast.center();
        for i in 0..=20 {
            let y = if model.fast.is_degenerate() {
                c
            } else {
                c + (i as f64 - 10.0) / 10.0 * 0.25 * (hi - lo)
            };
            for j in 0..=20 {
                let z = -5.0 + 0.5 * j as f64;
                let s = model.volatility.eval(y, z);
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::Model(format!("σ({y}, {z}) = {s} is not positive")));
                }
            }
        }
        Ok(model)
    }

    /// Same coefficients at new scales `(ε, δ)`.
    pub fn with_scales(&self, epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0 && delta.is_finite() && delta > 0.0) {
            return Err(Error::Model(format!(
                "scales must be positive, got ε = {epsilon}, δ = {delta}"
            )));
        }
        let mut m = self.clone();
        m.epsilon = epsilon;
        m.delta = delta;
        Ok(m)
    }

    pub fn correlations(&self) -> Correlations {
        self.correlations
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn lambda(&self, y: f64, z: f64) -> f64 {
        self.sharpe.eval(y, z)
    }

    #[inline]
    pub fn sigma(&self, y: f64, z: f64) -> f64 {
        self.volatility.eval(y, z)
    }

    /// `μ = λσ`
    #[inline]
    pub fn mu(&self, y: f64, z: f64) -> f64 {
        self.lambda(y, z) * self.sigma(y, z)
    }
}

/// `⟨f(·, z)⟩` under the invariant law.
pub fn invariant_average<F: Fn(f64, f64) -> f64>(model: &MarketModel, f: F, z: f64) -> Result<f64> {
    let mut acc = 0.0;
    for &(y, w) in model.fast.averaging_rule() {
        let v = f(y, z);
        if !v.is_finite() {
            return Err(Error::Quadrature { node: y });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `(λ̄, λ̂)` at `z` by direct quadrature.
pub fn sharpe_moments(model: &MarketModel, z: f64) -> Result<(f64, f64)> {
    let second = invariant_average(model, |y, z| model.lambda(y, z).powi(2), z)?;
    if !(second >= 0.0) {
        return Err(Error::Quadrature { node: z });
    }
    let first = invariant_average(model, |y, z| model.lambda(y, z), z)?;
    Ok((second.sqrt(), first))
}

/// `λ̄'(z)` by a Richardson-extrapolated central difference with step
/// `h_z = 1e-4·max(1, |z|)`.
pub fn lambda_bar_prime(model: &MarketModel, z: f64) -> Result<f64> {
    let h = z_step(z);
    let lb = |s: f64| sharpe_moments(model, s).map(|m| m.0).unwrap_or(f64::NAN);
    let d = richardson_derivative(lb, z, h);
    if !d.is_finite() {
        return Err(Error::Quadrature { node: z });
    }
    Ok(d)
}

/// Step used for all `z`-differences of averaged quantities.
pub fn z_step(z: f64) -> f64 {
    1e-4 * z.abs().max(1.0)
}

const POISSON_CELLS: usize = 880;
const CELL_NODES: usize = 8;

/// Solution of `L₀θ = λ²(·,z) - λ̄²(z)` with `⟨θ⟩ = 0`.
///
/// `∂_yθ(y) = 2/(a²Φ)(y) ∫_{-∞}^y SΦ`, switching to `-∫_y^∞ SΦ` right of
/// the center so that neither tail loses precision.
#[derive(Debug)]
pub struct PoissonSolution {
    model: MarketModel,
    z: f64,
    lambda_bar_sq: f64,
    zero: bool,
    lo: f64,
    width: f64,
    split: f64,
    /// `∫_{lo}^{y_k} SΦ` at cell boundaries.
    left: Vec<f64>,
    /// `∫_{y_k}^{hi} SΦ` at cell boundaries.
    right: Vec<f64>,
    rule: GaussLegendre,
    theta_nodes: OnceLock<(Vec<f64>, f64)>,
}

pub fn solve_poisson(model: &MarketModel, z: f64) -> Result<PoissonSolution> {
    let (lambda_bar, _) = sharpe_moments(model, z)?;
    let lambda_bar_sq = lambda_bar * lambda_bar;
    let rule = GaussLegendre::new(CELL_NODES);
    let (lo, hi) = model.fast.support();
    let width = (hi - lo) / POISSON_CELLS as f64;
    let mut sol = PoissonSolution {
        model: model.clone(),
        z,
        lambda_bar_sq,
        zero: true,
        lo,
        width,
        split: model.fast.center(),
        left: Vec::new(),
        right: Vec::new(),
        rule,
        theta_nodes: OnceLock::new(),
    };
    if model.fast.is_degenerate() || model.sharpe.is_y_free() {
        return Ok(sol);
    }
    let mut cells = Vec::with_capacity(POISSON_CELLS);
    let mut max_source: f64 = 0.0;
    let mut max_l2: f64 = lambda_bar_sq;
    let mut mass = 0.0;
    for k in 0..POISSON_CELLS {
        let a = lo + width * k as f64;
        let mut acc = 0.0;
        for (&x, &w) in sol.rule.nodes().iter().zip(sol.rule.weights()) {
            let y = a + 0.5 * width * (x + 1.0);
            let l2 = model.lambda(y, z).powi(2);
            let s = l2 - lambda_bar_sq;
            let phi = model.fast.log_density(y).exp();
            if !(s.is_finite() && phi.is_finite()) {
                return Err(Error::Quadrature { node: y });
            }
            max_source = max_source.max(s.abs());
            max_l2 = max_l2.max(l2);
            acc += w * s * phi;
            mass += 0.5 * width * w * phi;
        }
        cells.push(0.5 * width * acc);
    }
    if max_source <= 1e-14 * max_l2 {
        return Ok(sol);
    }
    let mut left = vec![0.0; POISSON_CELLS + 1];
    for k in 0..POISSON_CELLS {
        left[k + 1] = left[k] + cells[k];
    }
    let mut right = vec![0.0; POISSON_CELLS + 1];
    for k in (0..POISSON_CELLS).rev() {
        right[k] = right[k + 1] + cells[k];
    }
    let residual = left[POISSON_CELLS] / mass;
    if residual.abs() > 1e-10 * lambda_bar_sq.max(1.0) {
        return Err(Error::Centering { residual });
    }
    sol.zero = false;
    sol.left = left;
    sol.right = right;
    Ok(sol)
}

impl PoissonSolution {
    pub fn z(&self) -> f64 {
        self.z
    }

    /// True when the source vanishes and `θ ≡ 0`.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// `λ²(y, z) - λ̄²(z)`
    pub fn source(&self, y: f64) -> f64 {
        self.model.lambda(y, self.z).powi(2) - self.lambda_bar_sq
    }

    fn hi(&self) -> f64 {
        self.lo + self.width * POISSON_CELLS as f64
    }

    fn integrand(&self, y: f64) -> f64 {
        self.source(y) * self.model.fast.log_density(y).exp()
    }

    /// `∫_{-∞}^y SΦ` (or its right-tail equivalent), divided by `Φ(y)`.
    fn flux_over_density(&self, y: f64) -> f64 {
        let y = y.clamp(self.lo, self.hi());
        let k = (((y - self.lo) / self.width).floor() as usize).min(POISSON_CELLS - 1);
        let a = self.lo + self.width * k as f64;
        let b = a + self.width;
        let flux = if y <= self.split {
            self.left[k] + self.rule.integrate(a, y, |u| self.integrand(u))
        } else {
            -(self.right[k + 1] + self.rule.integrate(y, b, |u| self.integrand(u)))
        };
        flux / self.model.fast.log_density(y).exp()
    }

    /// `∂_yθ(y, z)`
    pub fn theta_y(&self, y: f64) -> f64 {
        if self.zero {
            return 0.0;
        }
        let a = self.model.fast.diffusion(y);
        2.0 * self.flux_over_density(y) / (a * a)
    }

    /// `θ` up to the centering constant, at cell boundaries.
    fn theta_table(&self) -> &(Vec<f64>, f64) {
        self.theta_nodes.get_or_init(|| {
            let mut table = vec![0.0; POISSON_CELLS + 1];
            for k in 0..POISSON_CELLS {
                let a = self.lo + self.width * k as f64;
                table[k + 1] = table[k] + self.rule.integrate(a, a + self.width, |u| self.theta_y(u));
            }
            let raw = |y: f64| self.raw_theta(&table, y);
            let mean: f64 = self
                .model
                .fast
                .averaging_rule()
                .iter()
                .map(|&(y, w)| w * raw(y))
                .sum();
            (table, mean)
        })
    }

    fn raw_theta(&self, table: &[f64], y: f64) -> f64 {
        let y = y.clamp(self.lo, self.hi());
        let k = (((y - self.lo) / self.width).floor() as usize).min(POISSON_CELLS - 1);
        let a = self.lo + self.width * k as f64;
        table[k] + self.rule.integrate(a, y, |u| self.theta_y(u))
    }

    /// `θ(y, z)` normalized by `⟨θ⟩ = 0`.
    pub fn theta(&self, y: f64) -> f64 {
        if self.zero {
            return 0.0;
        }
        let (table, mean) = self.theta_table();
        self.raw_theta(table, y) - mean
    }

    /// `L₀θ - S` with `θ_yy` from a numerical derivative of `θ_y`.
    pub fn generator_residual(&self, y: f64) -> f64 {
        let f = &self.model.fast;
        let a = f.diffusion(y);
        let h = 1e-3 * y.abs().max(1.0);
        let tyy = richardson_derivative(|u| self.theta_y(u), y, h);
        0.5 * a * a * tyy + f.drift(y) * self.theta_y(y) - if self.zero { 0.0 } else { self.source(y) }
    }
}

/// `B(z) = ⟨λ a ∂_yθ⟩`.
pub fn compute_b(model: &MarketModel, z: f64) -> Result<f64> {
    let sol = solve_poisson(model, z)?;
    compute_b_with(model, &sol)
}

pub fn compute_b_with(model: &MarketModel, sol: &PoissonSolution) -> Result<f64> {
    if sol.is_zero() {
        return Ok(0.0);
    }
    invariant_average(
        model,
        |y, z| model.lambda(y, z) * model.fast.diffusion(y) * sol.theta_y(y),
        sol.z(),
    )
}

/// Averaged quantities at one `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragePoint {
    pub lambda_bar: f64,
    pub lambda_hat: f64,
    pub lambda_bar_prime: f64,
    pub b: f64,
}

pub fn averages_at(model: &MarketModel, z: f64) -> Result<AveragePoint> {
    let (lambda_bar, lambda_hat) = sharpe_moments(model, z)?;
    Ok(AveragePoint {
        lambda_bar,
        lambda_hat,
        lambda_bar_prime: lambda_bar_prime(model, z)?,
        b: compute_b(model, z)?,
    })
}

#[derive(Debug, Clone)]
struct ZCache {
    /// `λ̄²` and `λ̄λ̄' = ½(λ̄²)'` are interpolated instead of `λ̄` and `λ̄'`:
    /// both are polynomial in `z` for the affine registry forms.
    lambda_bar_sq: UniformCubic,
    lambda_hat: UniformCubic,
    half_slope: UniformCubic,
    b: UniformCubic,
}

/// `z`-derivatives of cached averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageSlopes {
    pub lambda_hat: f64,
    /// `(λ̄λ̄')'`
    pub half_slope: f64,
    pub b: f64,
}

impl ZCache {
    fn slopes(&self, z: f64) -> AverageSlopes {
        AverageSlopes {
            lambda_hat: self.lambda_hat.eval(z).1,
            half_slope: self.half_slope.eval(z).1,
            b: self.b.eval(z).1,
        }
    }

    fn at(&self, z: f64) -> AveragePoint {
        let lambda_bar = self.lambda_bar_sq.eval(z).0.max(0.0).sqrt();
        AveragePoint {
            lambda_bar,
            lambda_hat: self.lambda_hat.eval(z).0,
            lambda_bar_prime: self.half_slope.eval(z).0 / lambda_bar,
            b: self.b.eval(z).0,
        }
    }
}

/// `λ̄, λ̂, λ̄', B` cached on a uniform `z`-grid with cubic interpolation.
/// Points outside the grid are computed directly.
#[derive(Debug, Clone)]
pub struct FactorAverages {
    model: MarketModel,
    cache: Option<Arc<ZCache>>,
}

pub const DEFAULT_Z_NODES: usize = 201;

/// Builds averages cached over `[z_lo, z_hi]` padded by 20%.
pub fn averaged_sharpe(model: &MarketModel, z_lo: f64, z_hi: f64) -> Result<FactorAverages> {
    averaged_sharpe_with(model, z_lo, z_hi, DEFAULT_Z_NODES)
}

pub fn averaged_sharpe_with(
    model: &MarketModel,
    z_lo: f64,
    z_hi: f64,
    nodes: usize,
) -> Result<FactorAverages> {
    if !(z_lo.is_finite() && z_hi.is_finite() && z_lo <= z_hi) || nodes < 4 {
        return Err(Error::Model(format!(
            "bad z-grid [{z_lo}, {z_hi}] with {nodes} nodes"
        )));
    }
    let pad = 0.2 * (z_hi - z_lo).max(1e-3);
    let (lo, hi) = (z_lo - pad, z_hi + pad);
    let step = (hi - lo) / (nodes - 1) as f64;
    let mut cols: [Vec<f64>; 4] = Default::default();
    for i in 0..nodes {
        let p = averages_at(model, lo + step * i as f64)?;
        cols[0].push(p.lambda_bar * p.lambda_bar);
        cols[1].push(p.lambda_hat);
        cols[2].push(p.lambda_bar * p.lambda_bar_prime);
        cols[3].push(p.b);
    }
    let [lb, lh, lbp, b] = cols;
    Ok(FactorAverages {
        model: model.clone(),
        cache: Some(Arc::new(ZCache {
            lambda_bar_sq: UniformCubic::new(lo, step, lb),
            lambda_hat: UniformCubic::new(lo, step, lh),
            half_slope: UniformCubic::new(lo, step, lbp),
            b: UniformCubic::new(lo, step, b),
        })),
    })
}

impl FactorAverages {
    /// Averages without a cache; every query is computed directly.
    pub fn uncached(model: &MarketModel) -> Self {
        Self {
            model: model.clone(),
            cache: None,
        }
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    /// `[lo, hi]` covered by the cache, if any.
    pub fn cached_range(&self) -> Option<(f64, f64)> {
        self.cache
            .as_deref()
            .map(|c| (c.lambda_bar_sq.start(), c.lambda_bar_sq.end()))
    }

    fn cached(&self, z: f64) -> Option<&ZCache> {
        self.cache.as_deref().filter(|c| c.lambda_bar_sq.contains(z))
    }

    pub fn lambda_bar(&self, z: f64) -> f64 {
        match self.cached(z) {
            Some(c) => c.at(z).lambda_bar,
            None => self.direct(z).lambda_bar,
        }
    }

    pub fn lambda_hat(&self, z: f64) -> f64 {
        match self.cached(z) {
            Some(c) => c.lambda_hat.eval(z).0,
            None => self.direct(z).lambda_hat,
        }
    }

    pub fn lambda_bar_prime(&self, z: f64) -> f64 {
        match self.cached(z) {
            Some(c) => c.at(z).lambda_bar_prime,
            None => self.direct(z).lambda_bar_prime,
        }
    }

    pub fn b(&self, z: f64) -> f64 {
        match self.cached(z) {
            Some(c) => c.b.eval(z).0,
            None => self.direct(z).b,
        }
    }

    /// All four quantities at `z`, from the cache when possible.
    pub fn at(&self, z: f64) -> AveragePoint {
        match self.cached(z) {
            Some(c) => c.at(z),
            None => self.direct(z),
        }
    }

    /// Values and `z`-slopes. Slopes come from the interpolant inside the
    /// cache and from central differences outside it.
    pub fn at_with_slopes(&self, z: f64) -> (AveragePoint, AverageSlopes) {
        if let Some(c) = self.cached(z) {
            return (c.at(z), c.slopes(z));
        }
        let h = 1e-3 * z.abs().max(1.0);
        let (lo, hi) = (self.direct(z - h), self.direct(z + h));
        let d = |f: fn(&AveragePoint) -> f64| (f(&hi) - f(&lo)) / (2.0 * h);
        let slopes = AverageSlopes {
            lambda_hat: d(|p| p.lambda_hat),
            half_slope: d(|p| p.lambda_bar * p.lambda_bar_prime),
            b: d(|p| p.b),
        };
        (self.direct(z), slopes)
    }

    /// Uncached evaluation. Failures surface as NaN, which every consumer
    /// treats as a path failure.
    pub fn direct(&self, z: f64) -> AveragePoint {
        averages_at(&self.model, z).unwrap_or(AveragePoint {
            lambda_bar: f64::NAN,
            lambda_hat: f64::NAN,
            lambda_bar_prime: f64::NAN,
            b: f64::NAN,
        })
    }

    pub fn poisson(&self, z: f64) -> Result<PoissonSolution> {
        solve_poisson(&self.model, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(sharpe: Sharpe, mean: f64, nu: f64) -> MarketModel {
        MarketModel::new(
            sharpe,
            Volatility::Constant { value: 0.2 },
            SlowDrift::Constant { value: 0.0 },
            SlowVol::Constant { value: 1.0 },
            Arc::new(OrnsteinUhlenbeck::new(mean, nu).unwrap()),
            Correlations::new(0.0, 0.0, 0.0).unwrap(),
            0.1,
            0.1,
        )
        .unwrap()
    }

    fn linear_y() -> Sharpe {
        Sharpe::Affine {
            base: 0.0,
            z_slope: 0.0,
            y_slope: 1.0,
        }
    }

    #[test]
    fn averages_of_simple_functions() {
        let m = model(linear_y(), 0.0, 0.7);
        assert!((invariant_average(&m, |_, _| 1.0, 0.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((invariant_average(&m, |y, _| y * y, 0.0).unwrap() - 0.49).abs() < 1e-14);
        let m = model(linear_y(), 1.5, 0.7);
        assert!(invariant_average(&m, |y, _| y - 1.5, 0.0).unwrap().abs() < 1e-14);
        assert!(invariant_average(&m, |y, _| 1.0 / (y - 1.5), 0.0).is_ok());
        assert!(invariant_average(&m, |_, _| f64::NAN, 0.0).is_err());
    }

    #[test]
    fn quadratic_poisson_solution() {
        // λ = y: θ = -y²/2 + ν²/2, θ_y = -y
        for &nu in &[0.3, 0.5, 1.0] {
            let m = model(linear_y(), 0.0, nu);
            let sol = solve_poisson(&m, 0.0).unwrap();
            for &y in &[-3.0 * nu, -0.4, 0.0, 0.1, 1.0, 4.0 * nu] {
                assert!((sol.theta_y(y) + y).abs() < 1e-11, "ν={nu} y={y} {}", sol.theta_y(y));
                let exact = -0.5 * y * y + 0.5 * nu * nu;
                assert!((sol.theta(y) - exact).abs() < 1e-10, "ν={nu} y={y}");
                assert!(sol.generator_residual(y).abs() < 1e-8 * (1.0 + y * y));
            }
            let b = compute_b(&m, 0.0).unwrap();
            let exact = -std::f64::consts::SQRT_2 * nu.powi(3);
            assert!(((b - exact) / exact).abs() < 1e-8, "{b} {exact}");
        }
    }

    #[test]
    fn y_free_sharpe_has_zero_corrections() {
        let m = model(
            Sharpe::Affine {
                base: 0.3,
                z_slope: 0.2,
                y_slope: 0.0,
            },
            0.0,
            1.0,
        );
        let p = averages_at(&m, -2.5).unwrap();
        assert!((p.lambda_bar - 0.2).abs() < 1e-14);
        assert!((p.lambda_hat + 0.2).abs() < 1e-14);
        assert_eq!(p.b, 0.0);
        assert!((p.lambda_bar_prime + 0.2).abs() < 1e-9);
        let sol = solve_poisson(&m, 1.0).unwrap();
        assert!(sol.is_zero());
        assert_eq!(sol.theta(0.3), 0.0);
        // a custom closure that happens to ignore y exercises the numerical zero test
        let c = model(Sharpe::Custom(Field::new(|_, z| 0.5 + z)), 0.0, 1.0);
        let sol = solve_poisson(&c, 0.2).unwrap();
        assert!(sol.is_zero());
        assert_eq!(compute_b(&c, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn product_sharpe_moments() {
        let m = model(Sharpe::ProductZY { scale: 1.0 }, 0.0, 1.0);
        let (lb, lh) = sharpe_moments(&m, -0.7).unwrap();
        assert!((lb - 0.7).abs() < 1e-13);
        assert!(lh.abs() < 1e-14);
    }

    #[test]
    fn degenerate_fast_factor() {
        let m = model(
            Sharpe::AffineZTanhY {
                base: 0.1,
                z_slope: 1.0,
                y_amp: 0.5,
            },
            1.0,
            0.0,
        );
        let (lb, _) = sharpe_moments(&m, 0.3).unwrap();
        assert!((lb - (0.4 + 0.5 * 1f64.tanh())).abs() < 1e-15);
        assert_eq!(compute_b(&m, 0.3).unwrap(), 0.0);
        assert!(solve_poisson(&m, 0.3).unwrap().is_zero());
    }

    #[test]
    fn correlation_checks() {
        assert!(Correlations::new(0.9, 0.9, -0.9).is_err());
        assert!(Correlations::new(1.0, 0.0, 0.0).is_err());
        let c = Correlations::new(-0.5, -0.3, 0.2).unwrap();
        let l = c.cholesky();
        let dot = |i: usize, j: usize| (0..3).map(|k| l[i][k] * l[j][k]).sum::<f64>();
        assert!((dot(0, 1) + 0.5).abs() < 1e-15);
        assert!((dot(0, 2) + 0.3).abs() < 1e-15);
        assert!((dot(1, 2) - 0.2).abs() < 1e-15);
        for i in 0..3 {
            assert!((dot(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cached_averages_track_direct_values() {
        let m = model(
            Sharpe::AffineZTanhY {
                base: 0.5,
                z_slope: 0.3,
                y_amp: 0.3,
            },
            0.0,
            1.0,
        );
        let avg = averaged_sharpe(&m, -2.0, 2.0).unwrap();
        for &z in &[-1.9, -0.33, 0.0, 1.17] {
            let c = avg.at(z);
            let d = avg.direct(z);
            assert!((c.lambda_bar - d.lambda_bar).abs() < 1e-9);
            assert!((c.lambda_hat - d.lambda_hat).abs() < 1e-9);
            assert!((c.b - d.b).abs() < 1e-8);
            assert!(c.lambda_hat.powi(2) <= c.lambda_bar.powi(2));
        }
        // beyond the padded range values come from direct evaluation
        let far = avg.at(7.0);
        assert_eq!(far, avg.direct(7.0));
    }

    #[test]
    fn ou_transition_is_stationary() {
        let ou = OrnsteinUhlenbeck::new(0.5, 0.8).unwrap();
        match ou.transition(0.3) {
            Transition::Linear { level, decay, scale } => {
                assert_eq!(level, 0.5);
                // Var' = decay² ν² + scale² = ν²
                assert!((decay * decay * 0.64 + scale * scale - 0.64).abs() < 1e-15);
            }
            Transition::Euler { .. } => panic!("OU steps exactly"),
        }
    }

    #[test]
    fn density_factor_matches_ou_averages() {
        let nu = 0.6_f64;
        let f = DensityFactor::new(
            Arc::new(|y| -y),
            Arc::new(move |_| nu * std::f64::consts::SQRT_2),
            Arc::new(move |y| -0.5 * y * y / (nu * nu)),
            (-15.0 * nu, 15.0 * nu),
            0.0,
        )
        .unwrap();
        let m = MarketModel::new(
            linear_y(),
            Volatility::Constant { value: 0.2 },
            SlowDrift::Constant { value: 0.0 },
            SlowVol::Constant { value: 1.0 },
            Arc::new(f),
            Correlations::new(0.0, 0.0, 0.0).unwrap(),
            0.1,
            0.1,
        )
        .unwrap();
        let (lb, _) = sharpe_moments(&m, 0.0).unwrap();
        assert!((lb - nu).abs() < 1e-12);
        let b = compute_b(&m, 0.0).unwrap();
        let exact = -std::f64::consts::SQRT_2 * nu.powi(3);
        assert!(((b - exact) / exact).abs() < 1e-8);
    }
}

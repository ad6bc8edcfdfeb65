//! Run configuration, parsed strictly from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asymptotics::{build_bundle_with, ExpansionBundle};
use crate::error::{Error, Result};
use crate::factors::{
    averaged_sharpe, Correlations, FastFactorSpec, MarketModel, Sharpe, SlowDrift, SlowVol,
    Volatility,
};
use crate::merton::{MertonMethod, SolverSettings};
use crate::simulate::{FloorBehavior, SimConfig, Strategy};
use crate::utility::{make_utility, UtilityKind, UtilitySpec};

/// Configurations shipped with the binary, addressable by name.
pub const EMBEDDED: [(&str, &str); 3] = [
    ("default", include_str!("../../configs/default.toml")),
    ("reference", include_str!("../../configs/reference.toml")),
    ("constant", include_str!("../../configs/constant.toml")),
];

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "MULTISCALE_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub utility: UtilityKind,
    pub model: ModelSpec,
    pub grid: ScaleGrid,
    #[serde(default)]
    pub solver: SolverSpec,
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub strategies: Vec<NamedStrategy>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub fast: FastFactorSpec,
    pub sharpe: Sharpe,
    pub volatility: Volatility,
    pub slow_drift: SlowDrift,
    pub slow_vol: SlowVol,
    pub correlations: Correlations,
}

/// Paired `(ε_i, δ_i)` grid points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleGrid {
    pub epsilon: Vec<f64>,
    pub delta: Vec<f64>,
}

impl ScaleGrid {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.epsilon.iter().copied().zip(self.delta.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub method: MertonMethod,
    /// `z`-range of the averages cache before padding. Defaults to
    /// `z0 ± 6√δ_max·max(1, √T)`.
    pub z_range: Option<[f64; 2]>,
    pub settings: SolverSettings,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            method: MertonMethod::ClosedFormPower,
            z_range: None,
            settings: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Total paths per cell; even when antithetic.
    pub paths: usize,
    pub horizon: f64,
    /// `Δt = min(ε, δ) / steps_per_scale`; at least 20.
    #[serde(default = "twenty")]
    pub steps_per_scale: f64,
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
    #[serde(default = "one")]
    pub s0: f64,
    pub seed: u64,
    #[serde(default = "yes")]
    pub antithetic: bool,
    /// Applies to the residual and optimality studies.
    #[serde(default = "yes")]
    pub control_variate: bool,
    /// Applies to the `simulate` subcommand.
    #[serde(default)]
    pub control_variate_plain: bool,
    #[serde(default)]
    pub floor: FloorBehavior,
    /// Stream per-path records from the `simulate` subcommand.
    #[serde(default)]
    pub record_paths: bool,
}

fn twenty() -> f64 {
    20.0
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStrategy {
    pub name: String,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub slope_band: [f64; 2],
    /// `|Ê|` must exceed this many standard errors.
    pub resolution: f64,
    /// `ℓ̂` may exceed zero by at most this many standard errors.
    pub optimality: f64,
    /// Allowed rise of `ℓ̂` between consecutive grid points, beyond noise.
    pub trend: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            slope_band: [0.7, 1.4],
            resolution: 2.0,
            optimality: 2.0,
            trend: 0.1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, falling back to an embedded config of that name.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_toml(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            Err(err) => match embedded(path.to_str().unwrap_or_default()) {
                Some(text) => Self::from_toml(text),
                None => Err(Error::Config(format!("{}: {err}", path.display()))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("`{field}`: {why}")));
        if self.name.trim().is_empty() {
            return bad("name", "scenario name is empty".into());
        }
        let g = &self.grid;
        if g.epsilon.is_empty() || g.epsilon.len() != g.delta.len() {
            return bad(
                "grid",
                format!(
                    "need matching non-empty epsilon/delta lists, got {} and {}",
                    g.epsilon.len(),
                    g.delta.len()
                ),
            );
        }
        if let Some(v) = g.epsilon.iter().chain(&g.delta).find(|v| !(v.is_finite() && **v > 0.0)) {
            return bad("grid", format!("entry {v} is not positive"));
        }
        let t = &self.tolerances;
        if !(t.slope_band[0] < t.slope_band[1]) {
            return bad("tolerances.slope_band", format!("{:?} is empty", t.slope_band));
        }
        for (name, v) in [
            ("tolerances.resolution", t.resolution),
            ("tolerances.optimality", t.optimality),
            ("tolerances.trend", t.trend),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, format!("{v} is not positive"));
            }
        }
        let s = &self.simulation;
        if s.steps_per_scale < 20.0 {
            return bad(
                "simulation.steps_per_scale",
                format!("{} < 20 under-resolves the fast scale", s.steps_per_scale),
            );
        }
        if s.paths == 0 || (s.antithetic && s.paths % 2 != 0) {
            return bad("simulation.paths", format!("{} is not a valid path count", s.paths));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return bad("simulation.horizon", format!("{} is not positive", s.horizon));
        }
        if !(s.x0 > 0.0 && s.x0.is_finite()) {
            return bad("simulation.x0", format!("{} is not positive", s.x0));
        }
        let mut names = std::collections::BTreeSet::new();
        for st in &self.strategies {
            if !names.insert(st.name.as_str()) {
                return bad("strategies", format!("duplicate name `{}`", st.name));
            }
            st.strategy
                .validate()
                .map_err(|e| Error::Config(format!("`strategies.{}`: {e}", st.name)))?;
        }
        if let Some([lo, hi]) = self.solver.z_range {
            if !(lo <= hi) {
                return bad("solver.z_range", format!("[{lo}, {hi}] is empty"));
            }
        }
        make_utility(self.utility.clone())
            .map_err(|e| Error::Config(format!("`utility`: {e}")))?;
        Ok(())
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec> {
        make_utility(self.utility.clone())
    }

    /// The market at grid point `(ε, δ)`.
    pub fn model(&self, epsilon: f64, delta: f64) -> Result<MarketModel> {
        let m = &self.model;
        MarketModel::new(
            m.sharpe.clone(),
            m.volatility.clone(),
            m.slow_drift.clone(),
            m.slow_vol.clone(),
            m.fast.build()?,
            m.correlations,
            epsilon,
            delta,
        )
    }

    pub fn z_range(&self) -> (f64, f64) {
        match self.solver.z_range {
            Some([lo, hi]) => (lo, hi),
            None => {
                let d = self.grid.delta.iter().copied().fold(0.0, f64::max);
                let w = 6.0 * d.sqrt() * self.simulation.horizon.sqrt().max(1.0);
                (self.simulation.z0 - w, self.simulation.z0 + w)
            }
        }
    }

    /// Expansion bundle at the first grid point; rescale with
    /// [`ExpansionBundle::with_scales`].
    pub fn bundle(&self) -> Result<ExpansionBundle> {
        let (e, d) = self.grid.points()[0];
        let model = self.model(e, d)?;
        let (lo, hi) = self.z_range();
        let averages = averaged_sharpe(&model, lo, hi)?;
        build_bundle_with(
            &model,
            &averages,
            &self.utility_spec()?,
            self.simulation.horizon,
            self.solver.method,
            &self.solver.settings,
        )
    }

    pub fn sim_config(&self, epsilon: f64, delta: f64, control_variate: bool) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            paths: s.paths,
            dt: epsilon.min(delta) / s.steps_per_scale,
            horizon: s.horizon,
            x0: s.x0,
            y0: s.y0,
            z0: s.z0,
            s0: s.s0,
            seed: s.seed,
            antithetic: s.antithetic,
            control_variate,
            diagnostics: false,
            floor: s.floor,
        }
    }
}

pub fn embedded(name: &str) -> Option<&'static str> {
    EMBEDDED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

//! Scenario files (TOML).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{db_to_linear, dbm_to_watts, SystemConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub m: usize,
    pub k: usize,
    /// Common SINR target (dB).
    pub gamma_db: f64,
    /// Per-user noise power (dBm).
    pub noise_dbm: f64,
    /// Minimum element spacing (mm).
    pub d_min: f64,
    /// Motor speeds (mm/ms) and driver powers (W) per axis.
    pub v_h: f64,
    pub v_v: f64,
    pub p_h: f64,
    pub p_v: f64,
    /// Positioning and data durations (s).
    pub t_ma: f64,
    pub t_data: f64,
    /// CSI error level `ε_k = κ‖ψ_k‖`.
    pub kappa: f64,
    /// Coupling decay; absent means no coupling.
    pub alpha_mc: Option<f64>,
    /// Carrier wavelength (mm).
    pub wavelength: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        let d = SystemConfig::defaults(2, 2, 10.0);
        Self {
            m: d.m,
            k: d.k,
            gamma_db: 10.0,
            noise_dbm: -80.0,
            d_min: d.d_min,
            v_h: d.v_h,
            v_v: d.v_v,
            p_h: d.p_h,
            p_v: d.p_v,
            t_ma: d.t_ma,
            t_data: d.t_data,
            kappa: 0.0,
            alpha_mc: None,
            wavelength: 60.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Side of the square transmit area in wavelengths.
    pub l: f64,
    /// Lattice step (mm).
    pub d: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { l: 0.5, d: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    /// Paths per user.
    pub paths: usize,
    /// Path-loss exponent.
    pub alpha: f64,
    /// Reference path loss at 1 m; `(λ/4π)²` when absent.
    pub l0: Option<f64>,
    /// User distance range (m).
    pub distance: [f64; 2],
    /// Divide each path's variance by the path count.
    pub per_path_normalize: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self { paths: 16, alpha: 2.2, l0: None, distance: [20.0, 80.0], per_path_normalize: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Global search (the proposed method).
    Bnb,
    /// Penalty SCA.
    Sca,
    Random,
    AntennaSelection,
    Ao,
    IgnoreMotion,
    Exhaustive,
    McOptimal,
    /// Coupling-blind placement with coupled beamformers.
    CouplingBlind,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bnb => "bnb",
            Scheme::Sca => "sca",
            Scheme::Random => "random",
            Scheme::AntennaSelection => "antenna-selection",
            Scheme::Ao => "ao",
            Scheme::IgnoreMotion => "ignore-motion",
            Scheme::Exhaustive => "exhaustive",
            Scheme::McOptimal => "mc-optimal",
            Scheme::CouplingBlind => "coupling-blind",
        }
    }

    /// Whether the scheme's elements stay on a fixed array.
    pub fn is_fixed_array(self) -> bool {
        self == Scheme::AntennaSelection
    }

    pub fn uses_coupling(self) -> bool {
        matches!(self, Scheme::McOptimal | Scheme::CouplingBlind)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Scheme::Bnb,
            Scheme::Sca,
            Scheme::Random,
            Scheme::AntennaSelection,
            Scheme::Ao,
            Scheme::IgnoreMotion,
            Scheme::Exhaustive,
            Scheme::McOptimal,
            Scheme::CouplingBlind,
        ];
        all.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    GammaDb,
    /// Area side in wavelengths.
    L,
    M,
    TMa,
    Kappa,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GammaDb => "gamma_db",
            SweepAxis::L => "l",
            SweepAxis::M => "m",
            SweepAxis::TMa => "t_ma",
            SweepAxis::Kappa => "kappa",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub count: u64,
    pub base: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { count: 1, base: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub schemes: Vec<Scheme>,
    /// Design against the worst-case CSI error instead of the nominal channel.
    pub robust: bool,
    /// Raise movable-array targets to `γ′` so the rate over the frame matches
    /// a fixed array transmitting throughout.
    pub compensate: bool,
    pub seeds: Seeds,
    pub sweep: Option<Sweep>,
    /// Absolute search gap (W).
    pub tolerance: f64,
    pub node_budget: usize,
    pub enumeration_budget: usize,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Bnb],
            robust: false,
            compensate: false,
            seeds: Seeds::default(),
            sweep: None,
            tolerance: 1e-4,
            node_budget: 100_000,
            enumeration_budget: crate::baselines::ENUMERATION_BUDGET,
            workers: 0,
        }
    }
}

/// One experiment: physical setup, grid, channel model and run plan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub system: SystemSection,
    pub grid: GridSection,
    pub channel: ChannelSection,
    pub run: RunSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            id: "default".into(),
            system: SystemSection::default(),
            grid: GridSection::default(),
            channel: ChannelSection::default(),
            run: RunSection::default(),
        }
    }
}

/// `γ′ = (1+γ)^{(T_Data+T_MA)/T_Data} − 1`.
pub fn compensated_gamma(gamma: f64, t_ma: f64, t_data: f64) -> f64 {
    (1.0 + gamma).powf((t_data + t_ma) / t_data) - 1.0
}

impl ScenarioConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::Config(s));
        if self.id.is_empty() {
            return bad("scenario id must not be empty".into());
        }
        if !(self.grid.l > 0.0 && self.grid.d > 0.0 && self.system.wavelength > 0.0) {
            return bad("grid scale, step and wavelength must be positive".into());
        }
        let [lo, hi] = self.channel.distance;
        if !(lo > 0.0 && hi >= lo) {
            return bad("distance range must satisfy 0 < min ≤ max".into());
        }
        if self.channel.paths == 0 || !(self.channel.alpha > 0.0) {
            return bad("need at least one path and a positive path-loss exponent".into());
        }
        if self.run.schemes.is_empty() {
            return bad("no schemes listed".into());
        }
        if self.run.seeds.count == 0 {
            return bad("seed count must be at least 1".into());
        }
        if !(self.run.tolerance > 0.0) {
            return bad("tolerance must be positive".into());
        }
        if let Some(s) = &self.run.sweep {
            if s.values.is_empty() {
                return bad("sweep has no values".into());
            }
            if s.axis == SweepAxis::M && s.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                return bad("M sweep values must be positive integers".into());
            }
        }
        if self.run.schemes.iter().any(|s| s.uses_coupling()) && self.system.alpha_mc.is_none() {
            return bad("coupling schemes need system.alpha_mc".into());
        }
        for v in self.sweep_points() {
            let at = self.at_point(v);
            crate::channel::build_grid(at.grid.l, at.grid.d, at.system.wavelength).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.system_config(None)?.validate()
    }

    /// Sweep values, or a single point at the base configuration.
    pub fn sweep_points(&self) -> Vec<Option<f64>> {
        match &self.run.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    pub fn sweep_name(&self) -> &'static str {
        self.run.sweep.as_ref().map_or("none", |s| s.axis.name())
    }

    /// Copy with the sweep variable set to `value`.
    pub fn at_point(&self, value: Option<f64>) -> Self {
        let mut c = self.clone();
        if let (Some(s), Some(v)) = (&self.run.sweep, value) {
            match s.axis {
                SweepAxis::GammaDb => c.system.gamma_db = v,
                SweepAxis::L => c.grid.l = v,
                SweepAxis::M => c.system.m = v as usize,
                SweepAxis::TMa => c.system.t_ma = v,
                SweepAxis::Kappa => c.system.kappa = v,
            }
        }
        c
    }

    /// Physical parameters in linear units; `scheme` selects compensated
    /// targets for movable arrays.
    pub fn system_config(&self, scheme: Option<Scheme>) -> Result<SystemConfig> {
        let s = &self.system;
        let mut gamma = db_to_linear(s.gamma_db);
        if self.run.compensate && scheme.is_some_and(|x| !x.is_fixed_array()) {
            gamma = compensated_gamma(gamma, s.t_ma, s.t_data);
        }
        let cfg = SystemConfig {
            m: s.m,
            k: s.k,
            noise_power: vec![dbm_to_watts(s.noise_dbm); s.k],
            sinr_target: vec![gamma; s.k],
            d_min: s.d_min,
            v_h: s.v_h,
            v_v: s.v_v,
            p_h: s.p_h,
            p_v: s.p_v,
            t_ma: s.t_ma,
            t_data: s.t_data,
            kappa: s.kappa,
            alpha_mc: s.alpha_mc,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

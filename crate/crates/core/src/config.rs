//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::Path as FsPath;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::choice::ModelVariant;
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::network::{DEFAULT_DETOUR_CAP, DEFAULT_K_MAX};
use crate::samplers::SliceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub chains: usize,
    /// Burn-in iterations.
    pub burn_in: usize,
    /// Post-burn-in iterations.
    pub samples: usize,
    /// Keep every `thinning`-th post-burn-in state.
    pub thinning: usize,
    /// CP rank R.
    pub rank: usize,
    pub model: ModelVariant,
    /// Store per-trip path labels in addition to per-cell counts.
    pub store_labels: bool,
    /// Abort ingestion above this fraction of malformed rows.
    pub max_bad_fraction: f64,
    pub priors: PriorConfig,
    pub kernels: KernelParams,
    pub state: StateConfig,
    pub slice: SliceSettings,
    pub time: TimeConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            chains: 1,
            burn_in: 8000,
            samples: 2000,
            thinning: 1,
            rank: 4,
            model: ModelVariant::Spatiotemporal,
            store_labels: false,
            max_bad_fraction: crate::data::DEFAULT_MAX_BAD_FRACTION,
            priors: PriorConfig::default(),
            kernels: KernelParams::default(),
            state: StateConfig::default(),
            slice: SliceSettings::default(),
            time: TimeConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Means of the log coefficients of variation (access, in-vehicle, transfer, egress).
    pub log_sigma_mean: [f64; 4],
    pub log_sigma_var: [f64; 4],
    /// Means of q1 and q2.
    pub q_mean: [f64; 2],
    pub q_var: [f64; 2],
    /// Inverse-Wishart scale for the choice-type covariance.
    pub omega0: [[f64; 2]; 2],
    pub nu0: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            log_sigma_mean: [-3.0; 4],
            log_sigma_var: [0.2; 4],
            q_mean: [0.0; 2],
            q_var: [0.1; 2],
            omega0: [[1.0, 0.0], [0.0, 1.0]],
            nu0: 5.0,
        }
    }
}

impl PriorConfig {
    pub fn omega0_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |i, j| self.omega0[i][j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum M0Policy {
    /// Ridge least-squares fit to mean observed trip times.
    WarmStart,
    /// Every attribute starts at `m0_value`.
    Constant,
    /// `m0_values`, one per attribute in cost-vector order.
    Given,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateConfig {
    /// Random-walk variance per attribute (s²).
    pub tau2: f64,
    pub m0: M0Policy,
    pub m0_value: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub m0_values: Vec<f64>,
    /// Diagonal of P0 (s²).
    pub p0_variance: f64,
    /// Ridge weight of the warm start, in trip-equivalents.
    pub ridge: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            tau2: 25.0,
            m0: M0Policy::WarmStart,
            m0_value: 120.0,
            m0_values: Vec::new(),
            p0_variance: 1e4,
            ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceSettings {
    /// Bracket width for the log coefficients of variation.
    pub sigma_width: f64,
    /// Bracket width for q1 and q2.
    pub q_width: f64,
    /// Successive (q1, q2) slice updates per iteration.
    pub q_sweeps: usize,
    pub max_shrink: usize,
}

impl Default for SliceSettings {
    fn default() -> Self {
        Self {
            sigma_width: 0.5,
            q_width: 0.2,
            q_sweeps: 1,
            max_shrink: 100,
        }
    }
}

impl SliceSettings {
    pub fn sigma(&self) -> Result<SliceConfig> {
        SliceConfig::new(self.sigma_width, self.max_shrink)
    }

    pub fn q(&self) -> Result<SliceConfig> {
        SliceConfig::new(self.q_width, self.max_shrink)
    }
}

/// Analysis window: `intervals` slots of `interval_minutes` from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub start: String,
    pub interval_minutes: u32,
    pub intervals: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            start: "06:00".into(),
            interval_minutes: 30,
            intervals: 32,
        }
    }
}

impl TimeConfig {
    /// Minutes after midnight of the window start.
    pub fn start_minutes(&self) -> Result<u32> {
        let bad = || Error::Parameter(format!("time.start '{}' is not HH:MM", self.start));
        let (h, m) = self.start.split_once(':').ok_or_else(bad)?;
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        if h > 23 || m > 59 {
            return Err(bad());
        }
        Ok(h * 60 + m)
    }

    /// Interval index (zero-based) of a clock time, if inside the window.
    pub fn interval_of(&self, minutes_after_midnight: u32) -> Result<Option<usize>> {
        let start = self.start_minutes()?;
        if minutes_after_midnight < start {
            return Ok(None);
        }
        let idx = ((minutes_after_midnight - start) / self.interval_minutes) as usize;
        Ok((idx < self.intervals).then_some(idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub k_max: usize,
    pub detour_cap: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            detour_cap: DEFAULT_DETOUR_CAP,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Schema {
            path: "config".into(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: format!("config.{}", e.path()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn t_len(&self) -> usize {
        self.time.intervals
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("chains", self.chains),
            ("burn_in", self.burn_in),
            ("samples", self.samples),
            ("thinning", self.thinning),
            ("time.intervals", self.time.intervals),
            ("time.interval_minutes", self.time.interval_minutes as usize),
            ("paths.k_max", self.paths.k_max),
            ("slice.q_sweeps", self.slice.q_sweeps),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.model != ModelVariant::Static && self.rank == 0 {
            return Err(Error::Parameter("rank must be at least 1 unless model = \"static\"".into()));
        }
        for k in 0..4 {
            if !self.priors.log_sigma_mean[k].is_finite() {
                return Err(Error::Parameter("priors.log_sigma_mean must be finite".into()));
            }
            positive("priors.log_sigma_var", self.priors.log_sigma_var[k])?;
        }
        for k in 0..2 {
            if !self.priors.q_mean[k].is_finite() {
                return Err(Error::Parameter("priors.q_mean must be finite".into()));
            }
            positive("priors.q_var", self.priors.q_var[k])?;
        }
        let omega = self.priors.omega0_matrix();
        if omega[(0, 1)] != omega[(1, 0)] || omega.cholesky().is_none() {
            return Err(Error::Parameter("priors.omega0 must be symmetric positive definite".into()));
        }
        if self.priors.nu0.is_nan() || self.priors.nu0 <= 1.0 {
            return Err(Error::Parameter(format!("priors.nu0 must exceed 1, got {}", self.priors.nu0)));
        }
        self.kernels.validate()?;
        positive("state.tau2", self.state.tau2)?;
        positive("state.p0_variance", self.state.p0_variance)?;
        positive("state.ridge", self.state.ridge)?;
        positive("state.m0_value", self.state.m0_value)?;
        if self.state.m0 == M0Policy::Given && self.state.m0_values.is_empty() {
            return Err(Error::Parameter("state.m0 = \"given\" needs state.m0_values".into()));
        }
        if self.state.m0_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("state.m0_values must be finite".into()));
        }
        self.slice.sigma()?;
        self.slice.q()?;
        self.time.start_minutes()?;
        if self.paths.detour_cap.is_nan() || self.paths.detour_cap < 1.0 {
            return Err(Error::Parameter("paths.detour_cap must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_bad_fraction) {
            return Err(Error::Parameter("max_bad_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

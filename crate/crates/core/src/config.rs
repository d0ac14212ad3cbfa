//! Experiment configuration (TOML) with validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bicycle::{BicycleParams, ScenarioConfig};
use crate::control_synthesis::TubeLaw;
use crate::error::{Error, Result};

/// RFF length scale: a number or `"median"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LengthScale {
    Value(f64),
    Named(String),
}

impl Default for LengthScale {
    fn default() -> Self {
        LengthScale::Named("median".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { state_lower: vec![-6.0, -0.8], state_upper: vec![6.0, 0.8], input_lower: vec![-0.6], input_upper: vec![0.6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub count: usize,
    pub length_scale: LengthScale,
    /// Points used by the median heuristic.
    pub median_points: usize,
    pub ridge: f64,
    pub safety_factor: f64,
    pub training_count: usize,
    pub validation_count: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            count: 300,
            length_scale: LengthScale::default(),
            median_points: 1000,
            ridge: 1e-6,
            safety_factor: 1.2,
            training_count: 20_000,
            validation_count: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of the stage state weight.
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    /// Diagonal weights defining the tube feedback `K = dlqr(A, B, Q_K, R_K)`.
    pub feedback_q: Vec<f64>,
    pub feedback_r: Vec<f64>,
    pub tube_law: TubeLaw,
    pub e_y_max: f64,
    pub e_psi_max: f64,
    pub delta_max: f64,
    pub max_sqp_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: vec![10.0, 10.0],
            r: vec![1.0],
            feedback_q: vec![3.0, 0.01],
            feedback_r: vec![1.0],
            tube_law: TubeLaw::Paper,
            e_y_max: 1.0,
            e_psi_max: 0.2,
            delta_max: 0.5,
            max_sqp_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub basis: u64,
    pub training: u64,
    pub validation: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { basis: 1, training: 2, validation: 3 }
    }
}

impl SeedConfig {
    /// All seeds derived from one base value.
    pub fn from_base(base: u64) -> Self {
        Self { basis: base, training: base.wrapping_add(1), validation: base.wrapping_add(2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainConfig,
    pub features: FeatureConfig,
    pub plant: BicycleParams,
    pub scenario: ScenarioConfig,
    pub mpc: MpcConfig,
    pub seeds: SeedConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: DomainConfig::default(),
            features: FeatureConfig::default(),
            plant: BicycleParams::default(),
            scenario: ScenarioConfig::default(),
            mpc: MpcConfig::default(),
            seeds: SeedConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Numeric length scale, or `None` for the median heuristic.
    pub fn length_scale(&self) -> Result<Option<f64>> {
        match &self.features.length_scale {
            LengthScale::Value(v) if *v > 0.0 && v.is_finite() => Ok(Some(*v)),
            LengthScale::Value(v) => cfg_err(format!("features.length_scale must be positive, got {v}")),
            LengthScale::Named(s) if s == "median" => Ok(None),
            LengthScale::Named(s) => cfg_err(format!("features.length_scale must be a number or \"median\", got \"{s}\"")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.features;
        if f.count == 0 {
            return cfg_err("features.count (D) must be at least 1");
        }
        if f.training_count == 0 || f.validation_count == 0 || f.median_points < 2 {
            return cfg_err("training_count and validation_count must be positive and median_points at least 2");
        }
        if !(f.ridge > 0.0) {
            return cfg_err("features.ridge must be positive");
        }
        if !(f.safety_factor > 1.0) {
            return cfg_err("features.safety_factor must exceed 1");
        }
        self.length_scale()?;
        let d = &self.domain;
        if d.state_lower.len() != 2 || d.state_upper.len() != 2 || d.input_lower.len() != 1 || d.input_upper.len() != 1 {
            return cfg_err("domain bounds need two state and one input entries");
        }
        let ordered = d.state_lower.iter().zip(&d.state_upper).chain(d.input_lower.iter().zip(&d.input_upper)).all(|(l, h)| l < h);
        if !ordered {
            return cfg_err("every domain lower bound must be below its upper bound");
        }
        let m = &self.mpc;
        if m.horizon == 0 {
            return cfg_err("mpc.horizon must be at least 1");
        }
        if m.q.len() != 2 || m.feedback_q.len() != 2 || m.r.len() != 1 || m.feedback_r.len() != 1 {
            return cfg_err("mpc weights are diagonals: q and feedback_q need 2 entries, r and feedback_r need 1");
        }
        if m.q.iter().chain(&m.feedback_q).any(|v| !(*v >= 0.0)) || m.r.iter().chain(&m.feedback_r).any(|v| !(*v > 0.0)) {
            return cfg_err("state weights must be nonnegative and input weights positive");
        }
        if m.max_sqp_iterations == 0 {
            return cfg_err("mpc.max_sqp_iterations must be at least 1");
        }
        let bounds = [m.e_y_max, m.e_psi_max, m.delta_max];
        if bounds.iter().any(|b| !(*b > 0.0)) {
            return cfg_err("constraint bounds must be positive");
        }
        let inside = |b: f64, lo: f64, hi: f64| -b > lo && b < hi;
        if !(inside(m.e_y_max, d.state_lower[0], d.state_upper[0])
            && inside(m.e_psi_max, d.state_lower[1], d.state_upper[1])
            && inside(m.delta_max, d.input_lower[0], d.input_upper[0]))
        {
            return cfg_err("the constraint box must lie strictly inside the training domain");
        }
        self.plant.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("[features]\ncount = 50\nlength_scale = 2.0\n[mpc]\ntube_law = \"radius\"\n").unwrap();
        assert_eq!(cfg.features.count, 50);
        assert_eq!(cfg.length_scale().unwrap(), Some(2.0));
        assert_eq!(cfg.mpc.tube_law, TubeLaw::Radius);
        assert_eq!(cfg.mpc.horizon, 20);
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "[features]\ncount = 0\n",
            "[features]\nlength_scale = \"mean\"\n",
            "[mpc]\ne_y_max = 7.0\n",
            "[domain]\nstate_lower = [1.0, -0.8]\nstate_upper = [-1.0, 0.8]\n",
            "[plant]\nspeed = 5.0\nwheelbase = 0.1\ndt = 0.033\nkappa_max = 0.1\n",
            "[mpc]\nunknown = 1\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}

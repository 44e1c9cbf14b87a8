//! The TOML run configuration. Every field has a default, so an empty file is a valid
//! config; unknown keys are rejected.

use cathtwin_core::anatomy::PhantomSpec;
use cathtwin_core::copilot::operator::LoopLimits;
use cathtwin_core::copilot::{ControlMode, CopilotConfig, Phase};
use cathtwin_core::kinematics::{JointLimits, JointState, ShapeFitConfig};
use cathtwin_core::metrics::CameraPair;
use cathtwin_core::probmap::{MapConfig, SampleOptions};
use cathtwin_core::rl::{EnvConfig, InitDistribution, SacConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base directory for artifacts; each subcommand writes its run directory below it.
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub phantom: PhantomSpec,
    pub rig: RigConfig,
    pub limits: JointLimits,
    pub env: EnvConfig,
    pub init: InitDistribution,
    pub sac: SacConfig,
    pub eval: EvalConfig,
    pub shape_fit: ShapeFitSection,
    pub map: MapSection,
    pub copilot: CopilotConfig,
    pub simulate: SimulateConfig,
    pub metrics: MetricsConfig,
    pub serve: ServeConfig,
    pub artifacts: Artifacts,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            phantom: PhantomSpec::default(),
            rig: RigConfig::default(),
            limits: JointLimits::default(),
            env: EnvConfig::default(),
            init: InitDistribution::default(),
            sac: SacConfig::default(),
            eval: EvalConfig::default(),
            shape_fit: ShapeFitSection::default(),
            map: MapSection::default(),
            copilot: CopilotConfig::default(),
            simulate: SimulateConfig::default(),
            metrics: MetricsConfig::default(),
            serve: ServeConfig::default(),
            artifacts: Artifacts::default(),
        }
    }
}

/// One seed per stochastic stage, so stages can be rerun independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub eval: u64,
    pub sampling: u64,
    pub map_fit: u64,
    pub operators: u64,
    pub shape: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            train: 0,
            eval: 1,
            sampling: 1,
            map_fit: 2,
            operators: 7,
            shape: 0,
        }
    }
}

/// Catheter geometry; the port itself comes from the phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub passive_length: f64,
    pub active_length: f64,
    pub sheath_gain: f64,
    pub core_gain: f64,
    pub min_exposed_length: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            passive_length: 10.0,
            active_length: 120.0,
            sheath_gain: 0.5,
            core_gain: 0.5,
            min_exposed_length: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rollouts: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeFitSection {
    pub samples: usize,
    pub bending_range: (f64, f64),
    pub model: ShapeFitConfig,
}

impl Default for ShapeFitSection {
    fn default() -> Self {
        Self {
            samples: 1000,
            bending_range: (0.0, 160.0),
            model: ShapeFitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Monte-Carlo rollouts sampled from the init distribution.
    pub rollouts: usize,
    pub sampling: SampleOptions,
    pub fit: MapConfig,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            rollouts: 500,
            sampling: SampleOptions::default(),
            fit: MapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Number of seeded scripted-operator profiles.
    pub operators: usize,
    pub limits: LoopLimits,
    /// Where the operators steer. Unset means the end of the policy's plan, which needs a
    /// trained policy even in master-slave mode.
    pub goal: Option<JointState>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            operators: 10,
            limits: LoopLimits::default(),
            goal: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub mode: ControlMode,
    pub phase: Phase,
    /// Ticks a command stays applied without being refreshed.
    pub hold_ticks: u32,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8765,
            mode: ControlMode::MasterSlave,
            phase: Phase::Initialization,
            hold_ticks: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Sample points on the ideal line per view.
    pub ideal_points: usize,
    pub alpha: f64,
    /// Explicit cameras; the default pair frames the phantom bounding box.
    pub cameras: Option<CameraPair>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ideal_points: 20,
            alpha: 0.05,
            cameras: None,
        }
    }
}

/// Input artifacts; unset paths resolve inside `output_dir`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Artifacts {
    pub policy: Option<PathBuf>,
    pub maps: Option<PathBuf>,
}

fn invalid(path: &str, message: impl ToString) -> CliError {
    CliError::InvalidConfig {
        path: path.to_string(),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            invalid(&path, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingArtifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    /// Canonical TOML with every default written out.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.phantom.layout().map_err(|e| invalid("phantom", e))?;
        let r = &self.rig;
        if !(r.passive_length >= 0.0 && r.active_length > 0.0 && r.min_exposed_length > 0.0) {
            return Err(invalid("rig", "lengths must be positive"));
        }
        if !(r.sheath_gain >= 0.0 && r.core_gain >= 0.0) {
            return Err(invalid("rig", "gains must be >= 0"));
        }
        self.limits.validate().map_err(|e| invalid("limits", e))?;
        self.env.validate().map_err(|e| invalid("env", e))?;
        self.sac.validate().map_err(|e| invalid("sac", e))?;
        if self.eval.rollouts == 0 {
            return Err(invalid("eval.rollouts", "must be > 0"));
        }
        let s = &self.shape_fit;
        if s.samples < 2 {
            return Err(invalid("shape_fit.samples", "must be >= 2"));
        }
        if !(s.bending_range.0 < s.bending_range.1) {
            return Err(invalid("shape_fit.bending_range", "must be increasing"));
        }
        if s.model.epochs == 0 || !(s.model.learning_rate > 0.0) {
            return Err(invalid("shape_fit.model", "epochs and learning_rate must be positive"));
        }
        if self.map.rollouts == 0 {
            return Err(invalid("map.rollouts", "must be > 0"));
        }
        let f = &self.map.fit;
        if f.k_tb == 0 || f.k_rb == 0 {
            return Err(invalid("map.fit", "component counts must be > 0"));
        }
        if f.grid < 2 || !(f.tol > 0.0) || f.max_iter == 0 || !(f.eig_floor > 0.0) {
            return Err(invalid("map.fit", "grid >= 2, tol > 0, max_iter > 0 and eig_floor > 0 required"));
        }
        self.copilot.validate().map_err(|e| invalid("copilot", e))?;
        if self.simulate.operators == 0 {
            return Err(invalid("simulate.operators", "must be > 0"));
        }
        if self.simulate.limits.max_ticks == 0 || !(self.simulate.limits.settle_time > 0.0) {
            return Err(invalid("simulate.limits", "max_ticks and settle_time must be positive"));
        }
        if let Some(g) = &self.simulate.goal {
            if !g.is_finite() || !self.limits.contains(g) {
                return Err(invalid("simulate.goal", "must be finite and inside the joint limits"));
            }
        }
        if self.serve.hold_ticks == 0 {
            return Err(invalid("serve.hold_ticks", "must be > 0"));
        }
        if self.metrics.ideal_points < 2 {
            return Err(invalid("metrics.ideal_points", "must be >= 2"));
        }
        if !(self.metrics.alpha > 0.0 && self.metrics.alpha < 1.0) {
            return Err(invalid("metrics.alpha", "must lie in (0, 1)"));
        }
        if let Some(c) = &self.metrics.cameras {
            c.top.validate().map_err(|e| invalid("metrics.cameras.top", e))?;
            c.sagittal.validate().map_err(|e| invalid("metrics.cameras.sagittal", e))?;
        }
        Ok(())
    }

    pub fn policy_path(&self) -> PathBuf {
        self.artifacts.policy.clone().unwrap_or_else(|| self.output_dir.join("train").join("policy.json"))
    }

    pub fn maps_path(&self) -> PathBuf {
        self.artifacts
            .maps
            .clone()
            .unwrap_or_else(|| self.output_dir.join("probmap").join("maps").join("probability_map.json"))
    }
}

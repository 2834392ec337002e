//! Run configuration: a TOML file, environment and command-line overrides,
//! and the hash stamped on every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::Controller;
use crate::error::{Error, Result};
use crate::gait::EssentialConstraints;
use crate::invariance::BarrierParams;
use crate::model::RobotModel;
use crate::sim::SimOptions;
use crate::synth::{default_essential, LoopConfig, SynthesisOptions};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STEP2STEP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub step_length: f64,
    pub step_duration: f64,
    pub step_height: f64,
    pub degree: usize,
    pub starts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub start_spread: f64,
    pub torque_weight: f64,
    pub torque_headroom: f64,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let e = default_essential();
        let o = SynthesisOptions::default();
        SynthesisSection {
            step_length: e.step_length,
            step_duration: e.step_duration,
            step_height: e.step_height,
            degree: o.degree,
            starts: o.starts,
            max_iterations: o.max_iterations,
            tolerance: o.tolerance,
            start_spread: o.start_spread,
            torque_weight: o.torque_weight,
            torque_headroom: o.torque_headroom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub steps: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { steps: crate::sim::STABILITY_STEPS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Steps simulated per fresh sample; 0 skips verification.
    pub horizon: usize,
    pub samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { horizon: 10, samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in model name or path to a model JSON file.
    pub model: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sim: SimOptions,
    pub controller: Controller,
    pub barrier: BarrierParams,
    pub synthesis: SynthesisSection,
    pub optimize: LoopConfig,
    pub simulate: SimulateSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "five_link".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            sim: SimOptions::default(),
            controller: Controller::default(),
            barrier: BarrierParams::default(),
            synthesis: SynthesisSection::default(),
            optimize: LoopConfig::default(),
            simulate: SimulateSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `STEP2STEP_SEED` when it is set to an integer.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")))?;
        }
        Ok(())
    }

    pub fn resolve_model(&self) -> Result<RobotModel> {
        match RobotModel::builtin(&self.model) {
            Ok(m) => Ok(m),
            Err(_) => {
                let path = Path::new(&self.model);
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "model '{}' is neither a built-in model nor an existing file",
                        self.model
                    )));
                }
                let model = RobotModel::from_json(&std::fs::read_to_string(path)?)?;
                model.validate()?;
                Ok(model)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve_model()?;
        let s = &self.sim;
        if !(s.rtol > 0.0 && s.atol > 0.0 && s.h_max > 0.0 && s.t_max_factor > 1.0) {
            return Err(Error::Config("sim: tolerances and h_max must be positive, t_max_factor above 1".into()));
        }
        self.controller.validate()?;
        self.barrier.validate()?;
        self.optimize.validate()?;
        let y = &self.synthesis;
        if y.starts == 0 || y.max_iterations == 0 || !(y.tolerance > 0.0) || !(y.start_spread >= 0.0) {
            return Err(Error::Config("synthesis: starts and max_iterations must be positive".into()));
        }
        if !(y.torque_weight >= 0.0 && y.torque_headroom > 0.0) {
            return Err(Error::Config("synthesis: torque_weight must be non-negative, torque_headroom positive".into()));
        }
        if !(y.step_duration > 0.0) {
            return Err(Error::Config("synthesis: step_duration must be positive".into()));
        }
        if self.simulate.steps == 0 {
            return Err(Error::Config("simulate: steps must be positive".into()));
        }
        Ok(())
    }

    pub fn essential(&self) -> EssentialConstraints {
        let y = &self.synthesis;
        EssentialConstraints::planar(y.step_length, y.step_duration, y.step_height)
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        let y = &self.synthesis;
        SynthesisOptions {
            degree: y.degree,
            starts: y.starts,
            seed: self.seed,
            max_iterations: y.max_iterations,
            tolerance: y.tolerance,
            start_spread: y.start_spread,
            torque_weight: y.torque_weight,
            torque_headroom: y.torque_headroom,
            controller: self.controller,
            sim: self.sim,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig { seed: self.seed, ..self.optimize }
    }

    /// SHA-256 over the canonical JSON of the configuration and the resolved
    /// model. The output directory does not contribute.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.optimize.seed = self.seed;
        let model = self.resolve_model()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        h.update(serde_json::to_vec(&model)?);
        Ok(hex::encode(h.finalize()))
    }
}

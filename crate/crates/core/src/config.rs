//! JSON run configuration: loading with path-aware diagnostics and default resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::{CertifyOptions, ShapeRefSet};
use crate::design::{ControllerStateSampling, DesignConfig, QuadrantMask};
use crate::error::{Error, Result};
use crate::model::{ControllerGains, PlantModel, SaturationMode, SmoothingParam};
use crate::sim::DEFAULT_STEP;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Exact,
    Smooth,
}

impl ModeName {
    pub fn with_zeta(self, zeta: SmoothingParam) -> SaturationMode {
        match self {
            ModeName::Exact => SaturationMode::Exact,
            ModeName::Smooth => SaturationMode::Smooth(zeta),
        }
    }
}

/// Every field optional; `resolve` fills the gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(rename = "J", skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<SmoothingParam>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrant_mask: Option<QuadrantMask>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_state: Option<ControllerStateSampling>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

/// The configuration file as written by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub plant: PlantModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_init: Option<ControllerGains>,
    /// Gains to certify or simulate; defaults to `controller_init`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerGains>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_ref: Option<ShapeRefSet>,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub certify: CertifyOptions,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSettings {
    pub x0: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mode: ModeName,
    pub step: f64,
}

/// Configuration with every default materialized. Serializes back into a valid [`ConfigFile`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub plant: PlantModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_init: Option<ControllerGains>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerGains>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_ref: Option<ShapeRefSet>,
    pub design: DesignConfig,
    pub certify: CertifyOptions,
    pub simulate: SimulateSettings,
}

fn config_err(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Config { path: path.into(), message: message.to_string() }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let parsed: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path.is_empty() { ".".to_string() } else { path }, e.into_inner())
        })?;
        parsed.check()?;
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        for (name, g) in [("controller_init", &self.controller_init), ("controller", &self.controller)] {
            if let Some(g) = g {
                g.check_compatible(&self.plant).map_err(|e| config_err(name, e))?;
            }
        }
        if let (Some(r), Some(g)) = (&self.shape_ref, self.controller_init.as_ref().or(self.controller.as_ref())) {
            let dim = self.plant.n() + g.nc();
            if r.dim() != dim {
                return Err(config_err("shape_ref.vertices", format!("vertices must have length {dim}, found {}", r.dim())));
            }
        }
        if let Some(mask) = &self.design.quadrant_mask {
            if mask.width() != self.plant.n() {
                return Err(config_err(
                    "design.quadrant_mask",
                    format!("patterns must have {} signs, found {}", self.plant.n(), mask.width()),
                ));
            }
        }
        if let (Some(x0), Some(g)) = (&self.simulate.x0, self.controller.as_ref().or(self.controller_init.as_ref())) {
            let want = self.plant.n() + g.nc();
            if x0.len() != want {
                return Err(config_err("simulate.x0", format!("expected {want} entries, found {}", x0.len())));
            }
        }
        Ok(())
    }

    /// Fill defaults. `fallback_seed` is used only when `design.seed` is absent.
    pub fn resolve(self, fallback_seed: u64) -> Result<Config> {
        let d = &self.design;
        let base = DesignConfig::with_seed(d.seed.unwrap_or(fallback_seed));
        let design = DesignConfig {
            horizon: d.horizon.unwrap_or(base.horizon),
            stages: d.stages.unwrap_or(base.stages),
            batch: d.batch.unwrap_or(base.batch),
            beta: d.beta.unwrap_or(base.beta),
            zeta: d.zeta.unwrap_or(base.zeta),
            learning_rate: d.lr.unwrap_or(base.learning_rate),
            epochs: d.epochs.unwrap_or(base.epochs),
            seed: base.seed,
            step: d.step.unwrap_or(base.step),
            quadrant_mask: d.quadrant_mask.clone(),
            controller_state: d.controller_state.unwrap_or_default(),
            clip_norm: d.clip_norm.unwrap_or(base.clip_norm),
        };
        design.validate().map_err(|e| config_err("design", e))?;
        if !(self.certify.strictness > 0.0) {
            return Err(config_err("certify.strictness", "must be positive"));
        }
        let s = &self.simulate;
        let simulate = SimulateSettings {
            x0: s.x0.clone(),
            horizon: s.horizon.unwrap_or(design.horizon),
            mode: s.mode.unwrap_or_default(),
            step: s.step.unwrap_or(DEFAULT_STEP),
        };
        if !(simulate.horizon > 0.0) {
            return Err(config_err("simulate.T", "must be positive"));
        }
        if !(simulate.step > 0.0) {
            return Err(config_err("simulate.step", "must be positive"));
        }
        Ok(Config {
            plant: self.plant,
            controller_init: self.controller_init,
            controller: self.controller,
            shape_ref: self.shape_ref,
            design,
            certify: self.certify,
            simulate,
        })
    }
}

impl Config {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn controller_init(&self) -> Result<&ControllerGains> {
        self.controller_init.as_ref().ok_or_else(|| config_err("controller_init", "missing"))
    }

    /// `controller`, falling back to `controller_init`.
    pub fn controller(&self) -> Result<&ControllerGains> {
        self.controller
            .as_ref()
            .or(self.controller_init.as_ref())
            .ok_or_else(|| config_err("controller", "missing (and no controller_init to fall back on)"))
    }

    pub fn shape_ref(&self) -> Result<&ShapeRefSet> {
        self.shape_ref.as_ref().ok_or_else(|| config_err("shape_ref", "missing"))
    }
}

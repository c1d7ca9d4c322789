//! TOML run configuration with embedded defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{DisturbanceParams, LossParams, StructureParams, TransducerParams};
use crate::plant::DEFAULT_CURRENT_WEIGHT;
use crate::sim::{SimConfig, SimPlant};
use crate::synthesis::SpsaOptions;

/// The default configuration file, as shipped.
pub const DEFAULT_TOML: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSettings {
    pub current_weight: f64,
    pub spsa: SpsaOptions,
}

impl Default for DesignSettings {
    fn default() -> Self {
        Self {
            current_weight: DEFAULT_CURRENT_WEIGHT,
            spsa: SpsaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub transducer: TransducerParams,
    pub structure: StructureParams,
    pub disturbance: DisturbanceParams,
    pub design_loss: LossParams,
    pub plant_loss: LossParams,
    pub design: DesignSettings,
    pub simulation: SimConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            transducer: TransducerParams::default(),
            structure: StructureParams::default(),
            disturbance: DisturbanceParams::default(),
            design_loss: LossParams::design(),
            plant_loss: LossParams::identified(),
            design: DesignSettings::default(),
            simulation: SimConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.simulation.current_weight = cfg.design.current_weight;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// The embedded defaults, or the file at `path`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Self::from_toml(DEFAULT_TOML),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transducer.validate()?;
        self.structure.validate()?;
        self.disturbance.validate()?;
        self.design_loss.validate()?;
        self.plant_loss.validate()?;
        if !(self.design.current_weight >= 0.0) {
            return Err(Error::Config(format!("current weight {}", self.design.current_weight)));
        }
        if !(self.design.spsa.observer_noise > 0.0) {
            return Err(Error::Config("observer noise must be positive".into()));
        }
        self.simulation.validate()
    }

    pub fn sim_plant(&self) -> SimPlant {
        SimPlant {
            transducer: self.transducer.clone(),
            structure: self.structure.clone(),
            disturbance: self.disturbance.clone(),
            loss: self.plant_loss.clone(),
        }
    }

    /// Simulation settings with the design's current weight applied.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            current_weight: self.design.current_weight,
            ..self.simulation.clone()
        }
    }
}

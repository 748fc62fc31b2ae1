//! Run configuration: one JSON object with a block per subsystem.
//!
//! ```
//! let cfg = cavg::config::RunConfig::from_json(r#"{"scenario": {"network": {"kind": "ring"}}}"#).unwrap();
//! assert_eq!(cfg.graph.scan_scale, 30.0);
//! assert_eq!(cfg.nn.heads, 8);
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::AdjacencyScheme;
use crate::nn::Architecture;
use crate::scenario::{GraphConfig, ScenarioConfig};
use crate::trainer::{PpoConfig, RewardWeights, TrainSetup};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{block}: {message}")]
    Parse { block: String, message: String },
    #[error("{block}: {message}")]
    Invalid { block: &'static str, message: String },
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per evaluation seed.
    pub episodes: usize,
    /// States sampled by the decentralisation check.
    pub decentralization_states: usize,
    /// Steps between sampled states.
    pub decentralization_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 10,
            decentralization_states: 100,
            decentralization_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub reward: RewardWeights,
    pub graph: GraphConfig,
    pub nn: Architecture,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            scenario: ScenarioConfig::default(),
            reward: RewardWeights::default(),
            graph: GraphConfig::default(),
            nn: Architecture::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
        };
        cfg.resolve();
        cfg
    }
}

fn parse_value<T: DeserializeOwned>(name: &str, v: serde_json::Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Parse {
            block: if path == "." { name.into() } else { format!("{name}.{path}") },
            message: e.into_inner().to_string(),
        }
    })
}

fn block<T: DeserializeOwned + Default>(
    obj: &mut serde_json::Map<String, serde_json::Value>,
    name: &str,
) -> Result<T, ConfigError> {
    obj.remove(name).map_or_else(|| Ok(T::default()), |v| parse_value(name, v))
}

impl RunConfig {
    /// Parse, fill defaults and validate.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            block: "config".into(),
            message: e.to_string(),
        })?;
        let serde_json::Value::Object(mut obj) = value else {
            return Err(ConfigError::Parse {
                block: "config".into(),
                message: "top level must be an object".into(),
            });
        };
        let defaults = RunConfig::default();
        let mut cfg = RunConfig {
            scenario: block(&mut obj, "scenario")?,
            reward: block(&mut obj, "reward")?,
            graph: block(&mut obj, "graph")?,
            nn: block(&mut obj, "nn")?,
            ppo: block(&mut obj, "ppo")?,
            eval: block(&mut obj, "eval")?,
            seeds: match obj.remove("seeds") {
                None => defaults.seeds,
                Some(v) => parse_value("seeds", v)?,
            },
            output_dir: match obj.remove("output_dir") {
                None => defaults.output_dir,
                Some(v) => parse_value("output_dir", v)?,
            },
        };
        if let Some(key) = obj.keys().next() {
            return Err(ConfigError::Parse {
                block: key.clone(),
                message: "unknown top-level block".into(),
            });
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Fill values that depend on other blocks: the scenario-dependent
    /// speed weight and the velocity-only scheme's target speed.
    pub fn resolve(&mut self) {
        self.reward.resolve(&self.scenario.network);
        if let AdjacencyScheme::VelocityOnly { target_speed, .. } = &mut self.graph.scheme {
            if *target_speed == 0.0 {
                *target_speed = self.scenario.target_speed;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |block, r: Result<(), String>| r.map_err(|message| ConfigError::Invalid { block, message });
        inv("scenario", self.scenario.validate())?;
        inv(
            "reward",
            self.reward
                .spec(&self.scenario.network, self.scenario.target_speed)
                .validate(),
        )?;
        inv("graph", self.graph.validate())?;
        inv("nn", self.nn.validate().map_err(|e| e.to_string()))?;
        inv("ppo", self.ppo.validate())?;
        let [lo, hi] = self.scenario.sim.cav_accel_bounds;
        if self.nn.action_low != lo || self.nn.action_high != hi {
            return Err(ConfigError::Invalid {
                block: "nn",
                message: format!(
                    "action range [{}, {}] differs from scenario.sim.cav_accel_bounds [{lo}, {hi}]",
                    self.nn.action_low, self.nn.action_high
                ),
            });
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError::Invalid {
                block: "eval",
                message: "episodes must be at least 1".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid {
                block: "seeds",
                message: "at least one seed is required".into(),
            });
        }
        Ok(())
    }

    /// Effective config as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact effective config, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            scenario: self.scenario.clone(),
            graph: self.graph,
            reward: self.reward.spec(&self.scenario.network, self.scenario.target_speed),
            arch: self.nn,
            ppo: self.ppo,
        }
    }
}

//! Scenario description and the step-level environment shared by training
//! and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{build_adjacency, AdjacencyMatrix, AdjacencyScheme, GraphError};
use crate::sim::{build_network, RoadNetwork, SimError, SimParams, SimState, StepInfo, OBS_DIM};
use crate::tensor::Tensor;
use crate::trainer::RewardSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: RoadNetwork,
    /// Closed networks only; the merge draws vehicle kinds from
    /// `sim.penetration_rate`.
    pub humans: usize,
    pub cavs: usize,
    /// v̄_T, m/s.
    pub target_speed: f64,
    pub horizon: usize,
    pub dt: f64,
    pub sim: SimParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            network: RoadNetwork::ring(230.0),
            humans: 6,
            cavs: 16,
            target_speed: 30.0 / 3.6,
            horizon: 3000,
            dt: 0.1,
            sim: SimParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.network.validate().map_err(|e| e.to_string())?;
        self.sim.validate().map_err(|e| e.to_string())?;
        if !(self.target_speed > 0.0 && self.target_speed.is_finite()) {
            return Err("target_speed must be positive".into());
        }
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err("dt must be positive".into());
        }
        if self.network.is_closed() && self.humans + self.cavs == 0 {
            return Err("a closed network needs at least one vehicle".into());
        }
        Ok(())
    }

    /// Same scenario with every CAV replaced by an IDM driver.
    pub fn all_human(&self) -> Self {
        let mut s = self.clone();
        s.humans += s.cavs;
        s.cavs = 0;
        s.sim.penetration_rate = 0.0;
        s
    }

    pub fn build(&self, seed: u64) -> Result<SimState, SimError> {
        build_network(&self.network, self.humans, self.cavs, seed, &self.sim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub scheme: AdjacencyScheme,
    /// SC, metres.
    pub scan_scale: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            scheme: AdjacencyScheme::default(),
            scan_scale: 30.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.scheme.validate().map_err(|e| e.to_string())?;
        if !(self.scan_scale > 0.0) {
            return Err("scan_scale must be positive".into());
        }
        Ok(())
    }
}

/// What the CAVs see at one step.
#[derive(Debug, Clone)]
pub struct Decision {
    pub agent_ids: Vec<u32>,
    /// `N × OBS_DIM`.
    pub obs: Tensor,
    pub adjacency: AdjacencyMatrix,
}

#[derive(Debug)]
pub struct Outcome {
    pub info: StepInfo,
    pub reward: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub struct Env<'a> {
    pub scenario: &'a ScenarioConfig,
    pub graph: &'a GraphConfig,
    pub reward: RewardSpec,
    pub state: SimState,
}

impl<'a> Env<'a> {
    pub fn new(
        scenario: &'a ScenarioConfig,
        graph: &'a GraphConfig,
        reward: RewardSpec,
        seed: u64,
    ) -> Result<Self, SimError> {
        Ok(Env {
            scenario,
            graph,
            reward,
            state: scenario.build(seed)?,
        })
    }

    /// Observations and adjacency of the CAVs present, or `None` without CAVs.
    pub fn decision(&self) -> Result<Option<Decision>, EnvError> {
        let obs = self.state.observations(self.reward.target_speed());
        if obs.is_empty() {
            return Ok(None);
        }
        let adjacency = build_adjacency(&self.state, &self.graph.scheme, self.graph.scan_scale)?;
        let mut data = Vec::with_capacity(obs.len() * OBS_DIM);
        for o in &obs {
            data.extend_from_slice(&o.features);
        }
        Ok(Some(Decision {
            agent_ids: obs.iter().map(|o| o.cav_id).collect(),
            obs: Tensor::from_vec(obs.len(), OBS_DIM, data),
            adjacency,
        }))
    }

    /// Current observation rows of `ids`; vehicles that have left keep
    /// `fallback`'s row.
    pub fn observe(&self, ids: &[u32], fallback: &Tensor) -> Tensor {
        let mut out = fallback.clone();
        let target = self.reward.target_speed();
        for (r, &id) in ids.iter().enumerate() {
            if let Ok(o) = self.state.local_observation(id, target) {
                for (c, f) in o.features.iter().enumerate() {
                    out.set(r, c, *f);
                }
            }
        }
        out
    }

    pub fn step(&mut self, ids: &[u32], actions: &[f64]) -> Result<Outcome, SimError> {
        let commands: BTreeMap<u32, f64> = ids.iter().copied().zip(actions.iter().copied()).collect();
        let info = self.state.step(&commands, self.scenario.dt)?;
        let reward = self
            .reward
            .from_records(self.state.network(), self.state.params(), &info.records);
        Ok(Outcome { info, reward })
    }
}

//! Episode stepping shared by training and evaluation.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::graph::AdjacencyMatrix;
use crate::nn::{gaussian_log_density, GraphBatch, Policy, Tape};
use crate::scenario::{Env, GraphConfig, ScenarioConfig};
use crate::sim::StepInfo;
use crate::tensor::Tensor;
use crate::trainer::RewardSpec;

/// One decision step of all CAVs present.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub episode: usize,
    /// Simulator step index at decision time.
    pub time_step: u64,
    pub agent_ids: Vec<u32>,
    pub obs: Tensor,
    /// Observations after the step, same rows; agents that left keep their
    /// decision-time row.
    pub next_obs: Tensor,
    pub adjacency: AdjacencyMatrix,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Team reward, unscaled.
    pub reward: f64,
    pub done: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the Gaussian policy.
    Sample,
    /// Use the mean action.
    Mean,
}

/// Learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub mean_speed: f64,
    pub mean_abs_accel: f64,
    pub episode_len: usize,
}

pub const LEARNING_CURVE_HEADER: [&str; 6] = ["episode", "seed", "return", "mean_speed", "mean_abs_accel", "episode_len"];

pub fn write_learning_curve<W: Write>(out: W, records: &[EpisodeRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LEARNING_CURVE_HEADER)?;
    for r in records {
        w.write_record([
            r.episode.to_string(),
            r.seed.to_string(),
            r.ret.to_string(),
            r.mean_speed.to_string(),
            r.mean_abs_accel.to_string(),
            r.episode_len.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Steps one episode at a time so the caller can update the policy between
/// steps.
pub struct EpisodeRunner<'a> {
    pub env: Env<'a>,
    pub episode: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
    horizon: usize,
    steps: usize,
    finished: bool,
    collided: bool,
    rewards: Vec<f64>,
    speed_sum: f64,
    accel_sum: f64,
    vehicle_steps: usize,
    log: Option<Vec<StepInfo>>,
}

impl<'a> EpisodeRunner<'a> {
    /// `env_seed` seeds the simulator, `rng` drives action sampling.
    pub fn new(
        scenario: &'a ScenarioConfig,
        graph: &'a GraphConfig,
        reward: RewardSpec,
        episode: usize,
        env_seed: u64,
        rng: ChaCha8Rng,
        keep_log: bool,
    ) -> Result<Self, TrainError> {
        Ok(EpisodeRunner {
            env: Env::new(scenario, graph, reward, env_seed)?,
            episode,
            seed: env_seed,
            rng,
            horizon: scenario.horizon,
            steps: 0,
            finished: false,
            collided: false,
            rewards: Vec::new(),
            speed_sum: 0.0,
            accel_sum: 0.0,
            vehicle_steps: 0,
            log: keep_log.then(Vec::new),
        })
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn take_log(&mut self) -> Vec<StepInfo> {
        self.log.take().unwrap_or_default()
    }

    /// Advance one step. Returns the decision sample when CAVs were present.
    /// CAVs require a policy.
    pub fn advance(&mut self, policy: Option<&Policy>, mode: ActionMode) -> Result<Option<StepSample>, TrainError> {
        if self.finished {
            return Ok(None);
        }
        let time_step = self.env.state.time_step;
        let decision = self.env.decision()?;
        let mut pending = None;
        let outcome = match decision {
            Some(d) => {
                let policy = policy.ok_or(TrainError::MissingPolicy)?;
                let graph = Arc::new(GraphBatch::single(&d.adjacency));
                let mut tape = Tape::new();
                let bound = policy.actor.bind(&mut tape)?;
                let out = policy.actor_forward(&mut tape, &bound, &d.obs, &graph)?;
                let mean = tape.value(out.mean).clone();
                let spread = tape.value(out.log_spread).item().exp();
                let actions: Vec<f64> = match mode {
                    ActionMode::Mean => mean.data().to_vec(),
                    ActionMode::Sample => mean
                        .data()
                        .iter()
                        .map(|m| m + spread * self.rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                let a = tape.input(Tensor::from_vec(actions.len(), 1, actions.clone()))?;
                let lp = gaussian_log_density(&mut tape, a, out.mean, out.log_spread)?;
                let log_probs = tape.value(lp).data().to_vec();
                let outcome = self.env.step(&d.agent_ids, &actions)?;
                pending = Some((d, actions, log_probs));
                outcome
            }
            None => self.env.step(&[], &[])?,
        };
        self.steps += 1;
        self.rewards.push(outcome.reward);
        for r in &outcome.info.records {
            self.speed_sum += r.speed;
            self.accel_sum += r.accel.abs();
        }
        self.vehicle_steps += outcome.info.records.len();
        self.collided = outcome.info.collided;
        self.finished = self.collided || self.steps >= self.horizon;

        let sample = pending.map(|(d, actions, log_probs)| {
            let next_obs = self.env.observe(&d.agent_ids, &d.obs);
            let done = d
                .agent_ids
                .iter()
                .map(|&id| self.collided || self.env.state.vehicle(id).is_none())
                .collect();
            StepSample {
                episode: self.episode,
                time_step,
                agent_ids: d.agent_ids,
                obs: d.obs,
                next_obs,
                adjacency: d.adjacency,
                actions,
                log_probs,
                reward: outcome.reward,
                done,
            }
        });
        if let Some(log) = &mut self.log {
            log.push(outcome.info);
        }
        Ok(sample)
    }

    pub fn record(&self) -> EpisodeRecord {
        let per = |s: f64| if self.vehicle_steps > 0 { s / self.vehicle_steps as f64 } else { 0.0 };
        EpisodeRecord {
            episode: self.episode,
            seed: self.seed,
            ret: self.rewards.iter().sum(),
            mean_speed: per(self.speed_sum),
            mean_abs_accel: per(self.accel_sum),
            episode_len: self.steps,
        }
    }
}

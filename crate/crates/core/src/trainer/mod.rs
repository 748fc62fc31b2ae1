//! Shared-policy multi-agent PPO.
//!
//! Every CAV acts with the same actor parameters. Decision steps are
//! buffered as per-agent tuples; once the buffer holds `batch_size` tuples
//! the critic computes per-agent values on the stacked step graphs, the
//! actor is updated on the clipped surrogate for `epochs` passes, the critic
//! on TD(0) errors that reuse each step's adjacency for the next state, and
//! the buffer is cleared.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod advantage;
pub mod ppo;
pub mod reward;
pub mod rollout;

pub use reward::{reward_merge, reward_ring_eight, RewardSpec, RewardWeights};
pub use rollout::{write_learning_curve, ActionMode, EpisodeRecord, EpisodeRunner, StepSample, LEARNING_CURVE_HEADER};

use crate::nn::{gaussian_log_density, Adam, AdamConfig, Architecture, GraphBatch, NnError, Policy, Tape};
use crate::scenario::{EnvError, GraphConfig, ScenarioConfig};
use crate::seeding::{derive_rng, derive_seed, ACTION_STREAM, ENV_STREAM, INIT_STREAM, SHUFFLE_STREAM};
use crate::sim::SimError;
use crate::tensor::Tensor;
use advantage::{buffer_returns, normalize, tuple_offsets};
use ppo::{clipped_surrogate, td_loss, td_targets};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("CAVs present but no policy given")]
    MissingPolicy,
    #[error("update diverged: step size fell below {0}")]
    Diverged(f64),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("{0}")]
    Observer(String),
}

impl From<SimError> for TrainError {
    fn from(e: SimError) -> Self {
        TrainError::Env(EnvError::Sim(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// γ.
    pub gamma: f64,
    /// ε.
    pub clip: f64,
    /// Per-agent tuples per update.
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Global gradient-norm bound per store; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    /// Multiplies rewards in the learning signal only; logged rewards are
    /// unscaled.
    pub reward_scale: f64,
    pub episodes: usize,
    /// Checkpoint cadence in episodes; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            clip: 0.2,
            batch_size: 2048,
            minibatch_size: 512,
            epochs: 10,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            max_grad_norm: Some(0.5),
            normalize_advantages: true,
            reward_scale: 0.01,
            episodes: 50,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err("gamma must lie in (0, 1)".into());
        }
        if !(self.clip > 0.0) {
            return Err("clip must be positive".into());
        }
        if self.batch_size == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return Err("batch_size, minibatch_size and epochs must be at least 1".into());
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err("step sizes must be non-negative".into());
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err("max_grad_norm must be positive".into());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err("reward_scale must be positive".into());
        }
        Ok(())
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub scenario: ScenarioConfig,
    pub graph: GraphConfig,
    pub reward: RewardSpec,
    pub arch: Architecture,
    pub ppo: PpoConfig,
}

impl Default for TrainSetup {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        let reward = RewardWeights::default().spec(&scenario.network, scenario.target_speed);
        TrainSetup {
            scenario,
            graph: GraphConfig::default(),
            reward,
            arch: Architecture::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        let check = |r: Result<(), String>| r.map_err(TrainError::Invalid);
        check(self.scenario.validate())?;
        check(self.graph.validate())?;
        check(self.reward.validate())?;
        check(self.ppo.validate())?;
        self.arch.validate()?;
        let [lo, hi] = self.scenario.sim.cav_accel_bounds;
        if self.arch.action_low != lo || self.arch.action_high != hi {
            return Err(TrainError::Invalid(
                "policy action range must equal the CAV acceleration bounds".into(),
            ));
        }
        Ok(())
    }

    /// Runner for episode `episode` of the run with master seed `seed`.
    pub fn runner(&self, seed: u64, episode: usize, mode_log: bool) -> Result<EpisodeRunner<'_>, TrainError> {
        EpisodeRunner::new(
            &self.scenario,
            &self.graph,
            self.reward,
            episode,
            derive_seed(seed, ENV_STREAM, episode as u64),
            derive_rng(seed, ACTION_STREAM, episode as u64),
            mode_log,
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub tuples: usize,
    /// Mean clipped-surrogate objective over the last epoch.
    pub actor_objective: f64,
    /// Mean squared TD error over the last epoch.
    pub critic_loss: f64,
    /// Minibatch steps rejected for non-finite values.
    pub rejected: usize,
}

/// Policy with its optimiser state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    actor_opt: Adam,
    critic_opt: Adam,
    updates: u64,
}

impl Learner {
    pub fn new(policy: Policy, adam: AdamConfig) -> Self {
        Learner {
            actor_opt: Adam::new(&policy.actor, adam),
            critic_opt: Adam::new(&policy.critic, adam),
            policy,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One PPO update on `samples`; `seed` drives minibatch shuffling.
    pub fn update(&mut self, samples: &[StepSample], ppo: &PpoConfig, seed: u64) -> Result<UpdateStats, TrainError> {
        let mut stats = UpdateStats::default();
        if samples.is_empty() {
            return Ok(stats);
        }
        let offsets = tuple_offsets(samples);
        let total = offsets[samples.len()];
        stats.tuples = total;

        let (graph, obs, next_obs) = stack(samples, &(0..samples.len()).collect::<Vec<_>>());
        let values = self.policy.values(&obs, &graph)?;
        let next_values = self.policy.values(&next_obs, &graph)?;
        let returns = buffer_returns(samples, ppo.gamma, ppo.reward_scale, next_values.data());
        let mut adv: Vec<f64> = returns.iter().zip(values.data()).map(|(g, v)| g - v).collect();
        if ppo.normalize_advantages {
            normalize(&mut adv);
        }

        let mut rng = derive_rng(seed, SHUFFLE_STREAM, self.updates);
        self.updates += 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut lr_scale = 1.0;
        for _ in 0..ppo.epochs {
            order.shuffle(&mut rng);
            let (mut obj_sum, mut loss_sum, mut count) = (0.0, 0.0, 0usize);
            let mut start = 0;
            while start < order.len() {
                let mut end = start;
                let mut n = 0;
                while end < order.len() && n < ppo.minibatch_size {
                    n += samples[order[end]].agent_ids.len();
                    end += 1;
                }
                let chosen = &order[start..end];
                start = end;

                let rows: Vec<usize> = chosen.iter().flat_map(|&i| offsets[i]..offsets[i + 1]).collect();
                let (graph, obs, next_obs) = stack(samples, chosen);
                let col = |v: Vec<f64>| Tensor::from_vec(v.len(), 1, v);
                let actions = col(chosen.iter().flat_map(|&i| samples[i].actions.iter().copied()).collect());
                let old_lp = col(chosen.iter().flat_map(|&i| samples[i].log_probs.iter().copied()).collect());
                let advantages = col(rows.iter().map(|&r| adv[r]).collect());
                let inv_n = 1.0 / rows.len() as f64;

                let before = (self.policy.clone(), self.actor_opt.clone(), self.critic_opt.clone());
                let step = (|| -> Result<(f64, f64), NnError> {
                    // Actor: ascend the mean clipped surrogate.
                    let policy = &mut self.policy;
                    let mut tape = Tape::new();
                    let bound = policy.actor.bind(&mut tape)?;
                    let out = policy.actor_forward(&mut tape, &bound, &obs, &graph)?;
                    let a = tape.input(actions.clone())?;
                    let lp = gaussian_log_density(&mut tape, a, out.mean, out.log_spread)?;
                    let objective = clipped_surrogate(&mut tape, lp, &old_lp, &advantages, ppo.clip)?;
                    let loss = tape.scale(objective, -inv_n)?;
                    let grads = tape.backward(loss)?;
                    policy.actor.zero_grad();
                    policy.actor.accumulate(&grads, &bound);
                    self.actor_opt
                        .step(&mut policy.actor, ppo.actor_lr * lr_scale, ppo.max_grad_norm);
                    let obj = tape.value(objective).item() * inv_n;

                    // Critic: semi-gradient TD(0) with the step's adjacency reused.
                    let next_v = policy.values(&next_obs, &graph)?;
                    let rewards: Vec<f64> = chosen
                        .iter()
                        .flat_map(|&i| std::iter::repeat_n(ppo.reward_scale * samples[i].reward, samples[i].agent_ids.len()))
                        .collect();
                    let done: Vec<bool> = chosen.iter().flat_map(|&i| samples[i].done.iter().copied()).collect();
                    let targets = td_targets(&rewards, &done, next_v.data(), ppo.gamma);
                    let mut tape = Tape::new();
                    let bound = policy.critic.bind(&mut tape)?;
                    let v = policy.critic_forward(&mut tape, &bound, &obs, &graph)?;
                    let sse = td_loss(&mut tape, v, &targets)?;
                    let loss = tape.scale(sse, inv_n)?;
                    let grads = tape.backward(loss)?;
                    policy.critic.zero_grad();
                    policy.critic.accumulate(&grads, &bound);
                    self.critic_opt
                        .step(&mut policy.critic, ppo.critic_lr * lr_scale, ppo.max_grad_norm);
                    if !policy.actor.is_finite() || !policy.critic.is_finite() {
                        return Err(NnError::NonFinite { op: "update" });
                    }
                    Ok((obj, tape.value(loss).item()))
                })();
                match step {
                    Ok((obj, loss)) => {
                        obj_sum += obj * rows.len() as f64;
                        loss_sum += loss * rows.len() as f64;
                        count += rows.len();
                    }
                    Err(NnError::NonFinite { .. }) => {
                        (self.policy, self.actor_opt, self.critic_opt) = before;
                        stats.rejected += 1;
                        lr_scale *= 0.5;
                        if lr_scale < 1e-6 {
                            return Err(TrainError::Diverged(lr_scale));
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if count > 0 {
                stats.actor_objective = obj_sum / count as f64;
                stats.critic_loss = loss_sum / count as f64;
            }
        }
        Ok(stats)
    }
}

/// Block graph and stacked observations of the chosen samples.
fn stack(samples: &[StepSample], chosen: &[usize]) -> (Arc<GraphBatch>, Tensor, Tensor) {
    let mut graph = GraphBatch::new();
    let rows: usize = chosen.iter().map(|&i| samples[i].agent_ids.len()).sum();
    let cols = samples[chosen[0]].obs.cols();
    let mut obs = Vec::with_capacity(rows * cols);
    let mut next = Vec::with_capacity(rows * cols);
    for &i in chosen {
        let s = &samples[i];
        graph.push(&s.adjacency);
        obs.extend_from_slice(s.obs.data());
        next.extend_from_slice(s.next_obs.data());
    }
    (
        Arc::new(graph),
        Tensor::from_vec(rows, cols, obs),
        Tensor::from_vec(rows, cols, next),
    )
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateStats>,
}

/// Train from a fresh policy initialised from `seed`.
///
/// `observer` sees every finished episode with the current policy.
pub fn train(
    setup: &TrainSetup,
    seed: u64,
    observer: &mut dyn FnMut(&EpisodeRecord, &Policy) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let policy = Policy::new(setup.arch, derive_seed(seed, INIT_STREAM, 0))?;
    train_from(setup, seed, policy, observer)
}

/// Train starting from `policy`.
pub fn train_from(
    setup: &TrainSetup,
    seed: u64,
    policy: Policy,
    observer: &mut dyn FnMut(&EpisodeRecord, &Policy) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let ppo = &setup.ppo;
    let mut learner = Learner::new(policy, ppo.adam);
    let mut buffer: Vec<StepSample> = Vec::new();
    let mut tuples = 0;
    let mut curve = Vec::with_capacity(ppo.episodes);
    let mut updates = Vec::new();
    for episode in 0..ppo.episodes {
        let mut runner = setup.runner(seed, episode, false)?;
        while !runner.finished() {
            if let Some(sample) = runner.advance(Some(&learner.policy), ActionMode::Sample)? {
                tuples += sample.agent_ids.len();
                buffer.push(sample);
            }
            if tuples >= ppo.batch_size {
                updates.push(learner.update(&buffer, ppo, seed)?);
                buffer.clear();
                tuples = 0;
            }
        }
        let mut record = runner.record();
        record.seed = seed;
        observer(&record, &learner.policy)?;
        curve.push(record);
    }
    if !buffer.is_empty() {
        updates.push(learner.update(&buffer, ppo, seed)?);
    }
    Ok(TrainOutcome {
        policy: learner.policy,
        curve,
        updates,
    })
}

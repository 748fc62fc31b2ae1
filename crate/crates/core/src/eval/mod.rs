//! Deterministic evaluation, space-time export and execution-locality checks.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod sweep;

pub use sweep::{
    apply_sweep_value, run_sweep, target_speed_change, write_sweep, write_target_speed_change, SpeedChange, SweepRow, SweepSpec,
    SweepVariable,
};

use crate::graph::AdjacencyMatrix;
use crate::nn::{GraphBatch, NnError, Policy};
use crate::scenario::{Env, GraphConfig, ScenarioConfig};
use crate::seeding::{derive_rng, derive_seed, EVAL_STREAM};
use crate::sim::trajectory::LoggedStep;
use crate::sim::{RoadNetwork, SimParams, StepInfo};
use crate::trainer::{ActionMode, EpisodeRunner, RewardSpec, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation seeds given")]
    NoSeeds,
    #[error("episode count must be at least 1")]
    NoEpisodes,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metrics of one evaluation seed, averaged over its episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mean_velocity: f64,
    pub mean_abs_accel: f64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub collisions: usize,
}

/// One recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTime {
    pub seed: u64,
    pub steps: Vec<StepInfo>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// m/s, mean over seeds of the vehicle-step mean speed.
    pub mean_velocity: f64,
    pub mean_velocity_std: f64,
    /// m/s², mean |acceleration| over all vehicles.
    pub mean_abs_accel: f64,
    pub mean_abs_accel_std: f64,
    /// Undiscounted episode return.
    #[serde(rename = "return")]
    pub ret: f64,
    pub return_std: f64,
    /// Fraction of episodes that ended in a collision.
    pub collision_rate: f64,
    pub episodes_per_seed: usize,
    pub per_seed: Vec<SeedMetrics>,
    /// First episode of every seed.
    #[serde(skip)]
    pub spacetime: Vec<SpaceTime>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the mean policy (no sampling) for `episodes` episodes per seed.
///
/// Without a policy the scenario must be CAV-free (see
/// [`ScenarioConfig::all_human`]).
pub fn evaluate(
    policy: Option<&Policy>,
    scenario: &ScenarioConfig,
    graph: &GraphConfig,
    reward: RewardSpec,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut spacetime = Vec::with_capacity(seeds.len());
    let mut collisions = 0;
    for &seed in seeds {
        let (mut v, mut a, mut r, mut c) = (0.0, 0.0, 0.0, 0);
        for ep in 0..episodes {
            let mut runner = EpisodeRunner::new(
                scenario,
                graph,
                reward,
                ep,
                derive_seed(seed, EVAL_STREAM, ep as u64),
                derive_rng(seed, EVAL_STREAM, u64::MAX - ep as u64),
                ep == 0,
            )?;
            while !runner.finished() {
                runner.advance(policy, ActionMode::Mean)?;
            }
            let rec = runner.record();
            v += rec.mean_speed;
            a += rec.mean_abs_accel;
            r += rec.ret;
            c += usize::from(runner.collided());
            if ep == 0 {
                spacetime.push(SpaceTime {
                    seed,
                    rewards: runner.rewards().to_vec(),
                    steps: runner.take_log(),
                });
            }
        }
        let n = episodes as f64;
        per_seed.push(SeedMetrics {
            seed,
            mean_velocity: v / n,
            mean_abs_accel: a / n,
            ret: r / n,
            collisions: c,
        });
        collisions += c;
    }
    let (mean_velocity, mean_velocity_std) = mean_std(&per_seed.iter().map(|s| s.mean_velocity).collect::<Vec<_>>());
    let (mean_abs_accel, mean_abs_accel_std) =
        mean_std(&per_seed.iter().map(|s| s.mean_abs_accel).collect::<Vec<_>>());
    let (ret, return_std) = mean_std(&per_seed.iter().map(|s| s.ret).collect::<Vec<_>>());
    Ok(EvalReport {
        mean_velocity,
        mean_velocity_std,
        mean_abs_accel,
        mean_abs_accel_std,
        ret,
        return_std,
        collision_rate: collisions as f64 / (episodes * seeds.len()) as f64,
        episodes_per_seed: episodes,
        per_seed,
        spacetime,
    })
}

pub const SPACETIME_HEADER: [&str; 4] = ["step", "vehicle_id", "route_pos", "speed"];
pub const SPEED_SERIES_HEADER: [&str; 2] = ["step", "mean_speed"];

/// `step,vehicle_id,route_pos,speed`, one row per vehicle per step.
pub fn write_spacetime<W: Write>(out: W, steps: &[StepInfo]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPACETIME_HEADER)?;
    for s in steps {
        for r in &s.records {
            w.write_record([
                s.time_step.to_string(),
                r.id.to_string(),
                r.route_pos.to_string(),
                r.speed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `step,mean_speed`; steps without vehicles are skipped.
pub fn write_speed_series<W: Write>(out: W, steps: &[StepInfo]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPEED_SERIES_HEADER)?;
    for s in steps {
        if s.records.is_empty() {
            continue;
        }
        let v = s.records.iter().map(|r| r.speed).sum::<f64>() / s.records.len() as f64;
        w.write_record([s.time_step.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One space-time row.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct SpaceTimeRow {
    pub step: u64,
    pub vehicle_id: u32,
    pub route_pos: f64,
    pub speed: f64,
}

pub fn read_spacetime<R: Read>(input: R) -> csv::Result<Vec<SpaceTimeRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Rewards of an episode of `steps` steps recomputed from logged
/// kinematics. Steps absent from the log had no vehicles and earn 0.
pub fn replay_rewards(
    reward: &RewardSpec,
    network: &RoadNetwork,
    params: &SimParams,
    logged: &[LoggedStep],
    steps: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; steps];
    for (step, records) in logged {
        if let Some(slot) = (*step as usize).checked_sub(1).and_then(|k| out.get_mut(k)) {
            *slot = reward.from_records(network, params, records);
        }
    }
    out
}

/// Agents (by index) whose state can reach agent `i`'s action: `layers`
/// hops through the neighbour masks, plus the observation partners of
/// every agent reached.
pub fn receptive_field(adj: &AdjacencyMatrix, partners: &[Vec<usize>], i: usize, layers: usize) -> BTreeSet<usize> {
    let mut field = BTreeSet::from([i]);
    for _ in 0..layers {
        let frontier: Vec<usize> = field.iter().copied().collect();
        for j in frontier {
            field.extend(adj.neighbor_set(j));
        }
    }
    let reached: Vec<usize> = field.iter().copied().collect();
    for j in reached {
        field.extend(partners[j].iter().copied());
    }
    field
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: usize,
    pub agent_id: u32,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecentralizationReport {
    pub states: usize,
    /// Agent-state pairs that had at least one vehicle outside the field.
    pub checks: usize,
    pub max_change: f64,
    pub violations: Vec<Violation>,
}

impl DecentralizationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const DECENTRALIZATION_TOLERANCE: f64 = 1e-9;

/// Sample `states` states along a mean-policy episode (every `stride`
/// steps) and, for every agent, perturb the speeds of all vehicles outside
/// its receptive field. The agent's mean action must move by less than
/// [`DECENTRALIZATION_TOLERANCE`].
#[allow(clippy::too_many_arguments)]
pub fn decentralization_check(
    policy: &Policy,
    scenario: &ScenarioConfig,
    graph: &GraphConfig,
    reward: RewardSpec,
    seed: u64,
    states: usize,
    stride: usize,
) -> Result<DecentralizationReport, EvalError> {
    let layers = if policy.arch.heads == 0 { 1 } else { 2 };
    let mut env = Env::new(scenario, graph, reward, derive_seed(seed, EVAL_STREAM, 0)).map_err(TrainError::from)?;
    let mut rng = derive_rng(seed, EVAL_STREAM, 1);
    let mut report = DecentralizationReport {
        states: 0,
        checks: 0,
        max_change: 0.0,
        violations: Vec::new(),
    };
    let mut step = 0usize;
    // Give up when CAVs never show up, e.g. an open network without CAV inflow.
    let max_steps = 20 * states * stride.max(1) + scenario.horizon;
    while report.states < states && step < max_steps {
        let decision = env.decision().map_err(TrainError::from)?;
        if step % stride.max(1) == 0 {
            if let Some(d) = &decision {
                let base = policy.act_mean(&d.obs, &Arc::new(GraphBatch::single(&d.adjacency)))?;
                let partners: Vec<Vec<usize>> = d
                    .agent_ids
                    .iter()
                    .map(|&id| {
                        let ids = env.state.observation_partner_ids(id).unwrap_or_default();
                        ids.iter()
                            .filter_map(|p| d.agent_ids.iter().position(|a| a == p))
                            .collect()
                    })
                    .collect();
                for (i, &agent) in d.agent_ids.iter().enumerate() {
                    let field: BTreeSet<u32> = receptive_field(&d.adjacency, &partners, i, layers)
                        .into_iter()
                        .map(|k| d.agent_ids[k])
                        .collect();
                    let mut probe = Env::new(scenario, graph, reward, 0).map_err(TrainError::from)?;
                    probe.state = env.state.clone();
                    let mut touched = false;
                    for v in &mut probe.state.vehicles {
                        if !field.contains(&v.id) {
                            v.speed += rng.random_range(0.5..1.5);
                            touched = true;
                        }
                    }
                    if !touched {
                        continue;
                    }
                    report.checks += 1;
                    let pd = probe.decision().map_err(TrainError::from)?.expect("CAVs unchanged");
                    let moved = policy.act_mean(&pd.obs, &Arc::new(GraphBatch::single(&pd.adjacency)))?;
                    let change = (moved.get(i, 0) - base.get(i, 0)).abs();
                    report.max_change = report.max_change.max(change);
                    if change >= DECENTRALIZATION_TOLERANCE {
                        report.violations.push(Violation {
                            state: report.states,
                            agent_id: agent,
                            change,
                        });
                    }
                }
                report.states += 1;
            }
        }
        let actions = match &decision {
            Some(d) => policy
                .act_mean(&d.obs, &Arc::new(GraphBatch::single(&d.adjacency)))?
                .data()
                .to_vec(),
            None => Vec::new(),
        };
        let ids = decision.map(|d| d.agent_ids).unwrap_or_default();
        let outcome = env.step(&ids, &actions).map_err(TrainError::from)?;
        step += 1;
        if outcome.info.collided {
            env = Env::new(scenario, graph, reward, derive_seed(seed, EVAL_STREAM, step as u64))
                .map_err(TrainError::from)?;
        }
    }
    Ok(report)
}

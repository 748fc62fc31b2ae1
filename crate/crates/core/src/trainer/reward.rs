//! Team rewards.
//!
//! Ring and figure eight:
//! `r = -w_v (v̄_T - v̄) + w_a (â - ā)` with `v̄` the mean speed of all
//! vehicles and `ā` the mean absolute CAV acceleration.
//!
//! Merge:
//! `r = -w_v (v̄_T - v̄) + w_h min((h̄ - t_min) / t_min, 0)` with `h̄` the
//! mean CAV time headway.
//!
//! Every CAV receives the same scalar.

use serde::{Deserialize, Serialize};

use crate::sim::{cav_headways, RoadNetwork, SimParams, VehicleKind, VehicleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    RingEight {
        speed_weight: f64,
        accel_weight: f64,
        target_speed: f64,
        /// â, m/s².
        accel_threshold: f64,
    },
    Merge {
        speed_weight: f64,
        headway_weight: f64,
        target_speed: f64,
        /// t_min, s.
        min_headway: f64,
    },
}

/// Reward weights as configured; the speed weight defaults per network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// `None` resolves to 2 on closed networks and 1 on the merge.
    pub speed_weight: Option<f64>,
    pub accel_weight: f64,
    pub accel_threshold: f64,
    pub headway_weight: f64,
    pub min_headway: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            speed_weight: None,
            accel_weight: 4.0,
            accel_threshold: 0.5,
            headway_weight: 0.1,
            min_headway: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn resolve(&mut self, network: &RoadNetwork) {
        if self.speed_weight.is_none() {
            self.speed_weight = Some(if network.is_closed() { 2.0 } else { 1.0 });
        }
    }

    pub fn spec(&self, network: &RoadNetwork, target_speed: f64) -> RewardSpec {
        let mut w = *self;
        w.resolve(network);
        let speed_weight = w.speed_weight.unwrap_or_default();
        if network.is_closed() {
            RewardSpec::RingEight {
                speed_weight,
                accel_weight: w.accel_weight,
                target_speed,
                accel_threshold: w.accel_threshold,
            }
        } else {
            RewardSpec::Merge {
                speed_weight,
                headway_weight: w.headway_weight,
                target_speed,
                min_headway: w.min_headway,
            }
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Returns 0 for an empty speed list. An empty CAV list gives `ā = 0`.
pub fn reward_ring_eight(
    speeds: &[f64],
    cav_accels: &[f64],
    speed_weight: f64,
    accel_weight: f64,
    target_speed: f64,
    accel_threshold: f64,
) -> f64 {
    let Some(v) = mean(speeds.iter().copied()) else { return 0.0 };
    let a = mean(cav_accels.iter().map(|a| a.abs())).unwrap_or(0.0);
    -speed_weight * (target_speed - v) + accel_weight * (accel_threshold - a)
}

/// Returns 0 for an empty speed list. An empty headway list drops the
/// headway term.
pub fn reward_merge(
    speeds: &[f64],
    cav_headways: &[f64],
    speed_weight: f64,
    headway_weight: f64,
    target_speed: f64,
    min_headway: f64,
) -> f64 {
    let Some(v) = mean(speeds.iter().copied()) else { return 0.0 };
    let headway = match mean(cav_headways.iter().copied()) {
        Some(h) => headway_weight * ((h - min_headway) / min_headway).min(0.0),
        None => 0.0,
    };
    -speed_weight * (target_speed - v) + headway
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), String> {
        let (weights, target, extra): (&[f64], f64, f64) = match self {
            RewardSpec::RingEight {
                speed_weight,
                accel_weight,
                target_speed,
                accel_threshold,
            } => (&[*speed_weight, *accel_weight], *target_speed, *accel_threshold),
            RewardSpec::Merge {
                speed_weight,
                headway_weight,
                target_speed,
                min_headway,
            } => {
                if !(*min_headway > 0.0) {
                    return Err("min_headway must be positive".into());
                }
                (&[*speed_weight, *headway_weight], *target_speed, *min_headway)
            }
        };
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err("reward weights must be finite and non-negative".into());
        }
        if !(target > 0.0) || !target.is_finite() {
            return Err("target speed must be positive".into());
        }
        if !extra.is_finite() {
            return Err("reward threshold must be finite".into());
        }
        Ok(())
    }

    pub fn target_speed(&self) -> f64 {
        match *self {
            RewardSpec::RingEight { target_speed, .. } | RewardSpec::Merge { target_speed, .. } => target_speed,
        }
    }

    pub fn with_target_speed(mut self, v: f64) -> Self {
        match &mut self {
            RewardSpec::RingEight { target_speed, .. } | RewardSpec::Merge { target_speed, .. } => *target_speed = v,
        }
        self
    }

    /// Reward of a step from the vehicle records logged after it.
    pub fn from_records(&self, network: &RoadNetwork, params: &SimParams, records: &[VehicleRecord]) -> f64 {
        let speeds: Vec<f64> = records.iter().map(|r| r.speed).collect();
        match *self {
            RewardSpec::RingEight {
                speed_weight,
                accel_weight,
                target_speed,
                accel_threshold,
            } => {
                let accels: Vec<f64> = records
                    .iter()
                    .filter(|r| r.kind == VehicleKind::Cav)
                    .map(|r| r.accel)
                    .collect();
                reward_ring_eight(&speeds, &accels, speed_weight, accel_weight, target_speed, accel_threshold)
            }
            RewardSpec::Merge {
                speed_weight,
                headway_weight,
                target_speed,
                min_headway,
            } => {
                let headways = cav_headways(network, params, records);
                reward_merge(&speeds, &headways, speed_weight, headway_weight, target_speed, min_headway)
            }
        }
    }
}

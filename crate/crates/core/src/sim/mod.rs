//! Microscopic single-lane traffic simulator.
//!
//! Vehicles are point masses moving along routes of a [`RoadNetwork`]. Human
//! drivers follow the IDM with additive action noise; CAVs apply externally
//! commanded accelerations clamped to `[a_dec, a_acc]`. All vehicles are
//! updated synchronously with forward Euler:
//!
//! ```text
//! v' = max(0, v + a·dt)
//! x' = x + v'·dt
//! ```
//!
//! A state is fully determined by the network, the parameters, the seed and
//! the sequence of CAV commands, so repeated runs are bit-identical.

mod idm;
mod network;
pub mod trajectory;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use idm::{equilibrium_speed, idm_accel, IdmParams, NoiseKind};
pub use network::{RoadNetwork, MAIN_ROUTE, RAMP_ROUTE};

/// Number of features in a CAV's local observation.
pub const OBS_DIM: usize = 6;

/// Time headways are capped at this value (s) for stopped or unled vehicles.
pub const MAX_HEADWAY: f64 = 100.0;

/// Floor applied to virtual (right-of-way / zipper) gaps so that yielding
/// vehicles brake hard instead of failing the IDM precondition.
const VIRTUAL_GAP_FLOOR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid network specification: {0}")]
    InvalidSpec(String),
    #[error("capacity exceeded: {vehicles} vehicles need {needed:.2} m but the route is {available:.2} m")]
    CapacityExceeded {
        vehicles: usize,
        needed: f64,
        available: f64,
    },
    #[error("degenerate gap {0} m passed to the car-following model")]
    DegenerateGap(f64),
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("no action supplied for CAV {0}")]
    MissingAction(u32),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Human,
    Cav,
}

impl VehicleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleKind::Human => "human",
            VehicleKind::Cav => "cav",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub kind: VehicleKind,
    /// Metres along the assigned route (front bumper).
    pub route_pos: f64,
    pub speed: f64,
    pub last_accel: f64,
    pub route_id: u32,
}

/// Dynamics parameters shared by every vehicle in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub idm: IdmParams,
    pub vehicle_length: f64,
    /// `[a_dec, a_acc]` for CAV commands.
    pub cav_accel_bounds: [f64; 2],
    /// Physical limits applied to human (IDM + noise) accelerations.
    pub human_accel_bounds: [f64; 2],
    /// Cap CAV speed at a braking-distance safe speed w.r.t. the leader.
    pub safety_clamp: bool,
    /// Distance (m) from the figure-eight crossing within which humans yield.
    pub right_of_way_window: f64,
    /// Distance (m) before the merge point where the two lanes zip together.
    pub merge_window: f64,
    /// Speed (m/s) of vehicles entering the merge network.
    pub spawn_speed: f64,
    /// Probability that a vehicle spawned in the merge network is a CAV.
    pub penetration_rate: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            idm: IdmParams::default(),
            vehicle_length: 5.0,
            cav_accel_bounds: [-3.0, 3.0],
            human_accel_bounds: [-9.0, 3.0],
            safety_clamp: false,
            right_of_way_window: 20.0,
            merge_window: 30.0,
            spawn_speed: 30.0 / 3.6,
            penetration_rate: 0.25,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        self.idm.validate()?;
        let [dec, acc] = self.cav_accel_bounds;
        if !(dec < 0.0 && acc > 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "cav_accel_bounds must satisfy a_dec < 0 < a_acc, got [{dec}, {acc}]"
            )));
        }
        let [hdec, hacc] = self.human_accel_bounds;
        if !(hdec < 0.0 && hacc > 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "human_accel_bounds must straddle zero, got [{hdec}, {hacc}]"
            )));
        }
        for (name, v) in [
            ("vehicle_length", self.vehicle_length),
            ("right_of_way_window", self.right_of_way_window),
            ("merge_window", self.merge_window),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.spawn_speed >= 0.0) {
            return Err(SimError::InvalidSpec("spawn_speed must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.penetration_rate) {
            return Err(SimError::InvalidSpec(format!(
                "penetration_rate must lie in [0, 1], got {}",
                self.penetration_rate
            )));
        }
        Ok(())
    }
}

/// Per-vehicle kinematics after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleRecord {
    pub id: u32,
    pub kind: VehicleKind,
    pub route_id: u32,
    pub route_pos: f64,
    pub speed: f64,
    pub accel: f64,
}

impl From<&VehicleState> for VehicleRecord {
    fn from(v: &VehicleState) -> Self {
        VehicleRecord {
            id: v.id,
            kind: v.kind,
            route_id: v.route_id,
            route_pos: v.route_pos,
            speed: v.speed,
            accel: v.last_accel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Index of the state reached by this step.
    pub time_step: u64,
    /// Every vehicle present after the step, in simulator order.
    pub records: Vec<VehicleRecord>,
    pub collided: bool,
    pub spawned: Vec<u32>,
    pub exited: Vec<u32>,
}

/// A CAV's normalized local observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub cav_id: u32,
    /// `[v/v_T, x/L, Δv_lead/v_T, d_lead/L, Δv_follow/v_T, d_follow/L]`.
    pub features: [f64; OBS_DIM],
}

#[derive(Debug, Clone, Copy)]
struct Leader {
    index: Option<usize>,
    gap: f64,
    speed: f64,
}

impl Leader {
    fn none() -> Self {
        Leader {
            index: None,
            gap: f64::INFINITY,
            speed: 0.0,
        }
    }
}

/// Complete simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time_step: u64,
    pub vehicles: Vec<VehicleState>,
    pub collided: bool,
    network: RoadNetwork,
    params: SimParams,
    rng: ChaCha8Rng,
    next_id: u32,
    spawn_credit: [f64; 2],
}

/// Place vehicles on `network` and return the initial state.
///
/// Closed networks start uniformly spaced at standstill, with CAV slots spread
/// evenly around the route and rotated by a seed-derived offset. The merge
/// network starts empty and fills from its inflow schedule.
pub fn build_network(
    network: &RoadNetwork,
    n_human: usize,
    n_cav: usize,
    seed: u64,
    params: &SimParams,
) -> Result<SimState, SimError> {
    network.validate()?;
    params.validate()?;
    let mut state = SimState {
        time_step: 0,
        vehicles: Vec::new(),
        collided: false,
        network: network.clone(),
        params: params.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_id: 0,
        spawn_credit: [1.0, 1.0],
    };
    if !network.is_closed() {
        return Ok(state);
    }

    let total = n_human + n_cav;
    if total == 0 {
        return Err(SimError::InvalidSpec("network must contain at least one vehicle".into()));
    }
    let per_vehicle = params.vehicle_length + params.idm.min_gap;
    let loops: Vec<usize> = match network {
        RoadNetwork::FigureEight { .. } => vec![total.div_ceil(2), total / 2],
        _ => vec![total],
    };
    let route_len = network.route_length(MAIN_ROUTE);
    for &count in &loops {
        let needed = count as f64 * per_vehicle;
        if needed > route_len {
            return Err(SimError::CapacityExceeded {
                vehicles: count,
                needed,
                available: route_len,
            });
        }
    }

    // Evenly interleave CAV slots, then rotate by a seed-derived offset.
    let offset = (seed % total as u64) as usize;
    let is_cav = |slot: usize| {
        let k = (slot + offset) % total;
        (k + 1) * n_cav / total > k * n_cav / total
    };
    for slot in 0..total {
        let (route_id, index, count) = match network {
            RoadNetwork::FigureEight { .. } => ((slot % 2) as u32, slot / 2, loops[slot % 2]),
            _ => (MAIN_ROUTE, slot, total),
        };
        let spacing = route_len / count as f64;
        // Loop 1 is staggered by half a spacing so the crossing is not
        // approached in lockstep.
        let shift = if route_id == 1 { 0.5 * spacing } else { 0.0 };
        let kind = if is_cav(slot) { VehicleKind::Cav } else { VehicleKind::Human };
        state.vehicles.push(VehicleState {
            id: slot as u32,
            kind,
            route_pos: (index as f64 * spacing + shift).rem_euclid(route_len),
            speed: 0.0,
            last_accel: 0.0,
            route_id,
        });
    }
    state.next_id = total as u32;
    state.collided = state.detect_collision();
    Ok(state)
}

impl SimState {
    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn rng_state(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn vehicle(&self, id: u32) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn vehicle_mut(&mut self, id: u32) -> Option<&mut VehicleState> {
        self.vehicles.iter_mut().find(|v| v.id == id)
    }

    /// Ids of CAVs currently in the network, in simulator order.
    pub fn cav_ids(&self) -> Vec<u32> {
        self.vehicles
            .iter()
            .filter(|v| v.kind == VehicleKind::Cav)
            .map(|v| v.id)
            .collect()
    }

    /// Position of vehicle `v` in the network's shared coordinate.
    pub fn coordinate(&self, v: &VehicleState) -> f64 {
        self.network.coordinate(v.route_id, v.route_pos)
    }

    pub fn records(&self) -> Vec<VehicleRecord> {
        self.vehicles.iter().map(VehicleRecord::from).collect()
    }

    /// Advance the simulation by `dt` seconds.
    ///
    /// `cav_actions` must hold a command for every CAV present. Collisions do
    /// not abort the step; they set [`StepInfo::collided`].
    pub fn step(&mut self, cav_actions: &BTreeMap<u32, f64>, dt: f64) -> Result<StepInfo, SimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::InvalidTimeStep(dt));
        }
        for v in &self.vehicles {
            if v.kind == VehicleKind::Cav && !cav_actions.contains_key(&v.id) {
                return Err(SimError::MissingAction(v.id));
            }
        }

        let physical = physical_leaders(&self.network, &self.params, &self.vehicles);
        let p = &self.params;
        let mut accels = Vec::with_capacity(self.vehicles.len());
        for (i, v) in self.vehicles.iter().enumerate() {
            let accel = match v.kind {
                VehicleKind::Human => {
                    let mut leader = physical[i];
                    if let Some(virt) = self.virtual_leader(i) {
                        if virt.gap < leader.gap {
                            leader = virt;
                        }
                    }
                    let base = if leader.gap > 0.0 {
                        idm::idm_accel_raw(v.speed, leader.gap, leader.speed, &p.idm)?
                    } else {
                        p.human_accel_bounds[0]
                    };
                    let noise = match p.idm.noise {
                        _ if p.idm.noise_mag == 0.0 => 0.0,
                        NoiseKind::Uniform => self.rng.random_range(-p.idm.noise_mag..=p.idm.noise_mag),
                        NoiseKind::Gaussian => Normal::new(0.0, p.idm.noise_mag)
                            .expect("noise magnitude validated")
                            .sample(&mut self.rng),
                    };
                    (base + noise).clamp(p.human_accel_bounds[0], p.human_accel_bounds[1])
                }
                VehicleKind::Cav => {
                    let [dec, acc] = p.cav_accel_bounds;
                    let mut a = cav_actions[&v.id].clamp(dec, acc);
                    if p.safety_clamp {
                        let leader = physical[i];
                        if leader.index.is_some() && leader.gap.is_finite() {
                            let v_safe = safe_speed(leader.gap, leader.speed, p);
                            a = a.min((v_safe - v.speed) / dt).max(dec);
                        }
                    }
                    // NaN commands are treated as coasting.
                    if a.is_nan() {
                        0.0
                    } else {
                        a
                    }
                }
            };
            accels.push(accel);
        }

        let closed = self.network.is_closed();
        for (v, &a) in self.vehicles.iter_mut().zip(&accels) {
            v.last_accel = a;
            v.speed = (v.speed + a * dt).max(0.0);
            v.route_pos += v.speed * dt;
            if closed {
                v.route_pos = v.route_pos.rem_euclid(self.network.route_length(v.route_id));
            }
        }

        let mut exited = Vec::new();
        let mut spawned = Vec::new();
        if let RoadNetwork::Merge { .. } = self.network {
            let network = self.network.clone();
            self.vehicles.retain(|v| {
                let keep = v.route_pos < network.route_length(v.route_id);
                if !keep {
                    exited.push(v.id);
                }
                keep
            });
            self.spawn_vehicles(dt, &mut spawned);
        }

        self.time_step += 1;
        self.collided = self.detect_collision();
        Ok(StepInfo {
            time_step: self.time_step,
            records: self.records(),
            collided: self.collided,
            spawned,
            exited,
        })
    }

    fn spawn_vehicles(&mut self, dt: f64, spawned: &mut Vec<u32>) {
        let RoadNetwork::Merge {
            inflow_main,
            inflow_ramp,
            ..
        } = self.network
        else {
            return;
        };
        for (route_id, inflow) in [(MAIN_ROUTE, inflow_main), (RAMP_ROUTE, inflow_ramp)] {
            let credit = &mut self.spawn_credit[route_id as usize];
            *credit += inflow * dt / 3600.0;
            if *credit < 1.0 {
                continue;
            }
            // The entry must be clear of the last vehicle on that route.
            let clearance = self
                .vehicles
                .iter()
                .filter(|v| v.route_id == route_id)
                .map(|v| v.route_pos - self.params.vehicle_length)
                .fold(f64::INFINITY, f64::min);
            if clearance <= self.params.idm.min_gap {
                continue;
            }
            *credit -= 1.0;
            let is_cav = self.rng.random::<f64>() < self.params.penetration_rate;
            let id = self.next_id;
            self.next_id += 1;
            self.vehicles.push(VehicleState {
                id,
                kind: if is_cav { VehicleKind::Cav } else { VehicleKind::Human },
                route_pos: 0.0,
                speed: self.params.spawn_speed,
                last_accel: 0.0,
                route_id,
            });
            spawned.push(id);
        }
    }

    /// Yielding leader for human drivers at the figure-eight crossing or in
    /// the merge zipper window.
    fn virtual_leader(&self, ego: usize) -> Option<Leader> {
        let e = &self.vehicles[ego];
        let len = self.params.vehicle_length;
        match self.network {
            RoadNetwork::FigureEight {
                loop_length,
                conflict_start,
                conflict_length,
            } => {
                let window = self.params.right_of_way_window;
                let progress = |x: f64| {
                    let into = (x - conflict_start).rem_euclid(loop_length);
                    if into <= conflict_length + len {
                        -into
                    } else {
                        loop_length - into
                    }
                };
                let pe = progress(e.route_pos);
                if !(0.0..=window).contains(&pe) {
                    return None;
                }
                self.vehicles
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.route_id != e.route_id)
                    .map(|(j, c)| (j, progress(c.route_pos)))
                    .filter(|&(j, pc)| {
                        pc > -(conflict_length + len)
                            && pc <= window
                            && (pc < pe || (pc == pe && self.vehicles[j].route_id < e.route_id))
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    // Yield by treating the zone entry as a stop line until
                    // the crossing vehicle has cleared the zone.
                    .map(|(j, _)| Leader {
                        index: Some(j),
                        gap: pe.max(VIRTUAL_GAP_FLOOR),
                        speed: 0.0,
                    })
            }
            RoadNetwork::Merge { merge_point, .. } => {
                let window_start = merge_point - self.params.merge_window;
                let xe = self.coordinate(e);
                if !(window_start..merge_point).contains(&xe) {
                    return None;
                }
                self.vehicles
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.route_id != e.route_id)
                    .map(|(j, c)| (j, self.coordinate(c)))
                    .filter(|&(j, xc)| {
                        (window_start..merge_point).contains(&xc)
                            && (xc > xe || (xc == xe && self.vehicles[j].route_id < e.route_id))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, xc)| Leader {
                        index: Some(j),
                        gap: (xc - xe - len).max(VIRTUAL_GAP_FLOOR),
                        speed: self.vehicles[j].speed,
                    })
            }
            RoadNetwork::Ring { .. } => None,
        }
    }

    /// True iff some bumper-to-bumper gap is non-positive or two vehicles
    /// from different routes occupy a conflict zone at the same time.
    pub fn detect_collision(&self) -> bool {
        let leaders = physical_leaders(&self.network, &self.params, &self.vehicles);
        if leaders.iter().any(|l| l.index.is_some() && l.gap <= 0.0) {
            return true;
        }
        let len = self.params.vehicle_length;
        let occupying: Vec<(u32, bool)> = match self.network {
            RoadNetwork::Ring { .. } => return false,
            RoadNetwork::FigureEight {
                loop_length,
                conflict_start,
                conflict_length,
            } => self
                .vehicles
                .iter()
                .map(|v| {
                    let into = (v.route_pos - conflict_start).rem_euclid(loop_length);
                    (v.route_id, into <= conflict_length + len)
                })
                .collect(),
            RoadNetwork::Merge { merge_point, .. } => self
                .vehicles
                .iter()
                .map(|v| {
                    let x = self.coordinate(v);
                    (v.route_id, x >= merge_point - len && x < merge_point)
                })
                .collect(),
        };
        let mut seen = [false; 2];
        for (route, inside) in occupying {
            if inside {
                seen[(route as usize).min(1)] = true;
            }
        }
        seen[0] && seen[1]
    }

    /// Nearest CAV ahead and behind `cav_id` as `(distance, vehicle index)`.
    fn observation_partners(&self, ego: &VehicleState) -> [Option<(f64, usize)>; 2] {
        let closed = self.network.is_closed();
        let coord_len = self.network.coordinate_length();
        let xe = self.coordinate(ego);
        let mut lead: Option<(f64, usize)> = None;
        let mut follow: Option<(f64, usize)> = None;
        for (k, c) in self.vehicles.iter().enumerate() {
            if c.id == ego.id || c.kind != VehicleKind::Cav {
                continue;
            }
            if matches!(self.network, RoadNetwork::FigureEight { .. }) && c.route_id != ego.route_id {
                continue;
            }
            let xc = self.coordinate(c);
            let (ahead, behind) = if closed {
                let ahead = (xc - xe).rem_euclid(coord_len);
                (ahead, (coord_len - ahead).rem_euclid(coord_len))
            } else {
                (xc - xe, xe - xc)
            };
            if (closed || ahead > 0.0 || (ahead == 0.0 && c.id > ego.id)) && lead.is_none_or(|(d, _)| ahead < d) {
                lead = Some((ahead, k));
            }
            if (closed || behind > 0.0 || (behind == 0.0 && c.id < ego.id))
                && follow.is_none_or(|(d, _)| behind < d)
            {
                follow = Some((behind, k));
            }
        }
        [lead, follow]
    }

    /// Ids of the CAVs whose state enters `cav_id`'s observation (its
    /// nearest CAV ahead and behind).
    pub fn observation_partner_ids(&self, cav_id: u32) -> Result<Vec<u32>, SimError> {
        let ego = self
            .vehicles
            .iter()
            .find(|v| v.id == cav_id && v.kind == VehicleKind::Cav)
            .ok_or(SimError::UnknownVehicle(cav_id))?;
        Ok(self
            .observation_partners(ego)
            .iter()
            .flatten()
            .map(|&(_, k)| self.vehicles[k].id)
            .collect())
    }

    /// Observation of CAV `cav_id`, normalized by `target_speed` and the
    /// network's coordinate length.
    pub fn local_observation(&self, cav_id: u32, target_speed: f64) -> Result<Observation, SimError> {
        let ego = self
            .vehicles
            .iter()
            .find(|v| v.id == cav_id && v.kind == VehicleKind::Cav)
            .ok_or(SimError::UnknownVehicle(cav_id))?;
        let coord_len = self.network.coordinate_length();
        let [lead, follow] = self.observation_partners(ego);
        let lead = lead.map(|(d, k)| (d, self.vehicles[k].speed));
        let follow = follow.map(|(d, k)| (d, self.vehicles[k].speed));
        let slot = |n: Option<(f64, f64)>| match n {
            Some((d, speed)) => ((speed - ego.speed) / target_speed, d / coord_len),
            None => (0.0, 1.0),
        };
        let (lead_dv, lead_d) = slot(lead);
        let (follow_dv, follow_d) = slot(follow);
        Ok(Observation {
            cav_id,
            features: [
                ego.speed / target_speed,
                ego.route_pos / self.network.route_length(ego.route_id),
                lead_dv,
                lead_d,
                follow_dv,
                follow_d,
            ],
        })
    }

    /// Observations of every CAV in simulator order.
    pub fn observations(&self, target_speed: f64) -> Vec<Observation> {
        self.cav_ids()
            .into_iter()
            .map(|id| self.local_observation(id, target_speed).expect("id taken from the live CAV list"))
            .collect()
    }
}

/// Braking-distance safe speed: the ego can stop at `|a_dec|` within
/// `gap - s0` while the leader stops at the physical human limit.
fn safe_speed(gap: f64, leader_speed: f64, p: &SimParams) -> f64 {
    let ego_decel = -p.cav_accel_bounds[0];
    let leader_decel = -p.human_accel_bounds[0];
    let room = (gap - p.idm.min_gap).max(0.0);
    (2.0 * ego_decel * room + leader_speed * leader_speed * ego_decel / leader_decel).sqrt()
}

/// Physical (same-lane) leader of every vehicle. On closed networks a lone
/// vehicle follows itself around the loop.
fn physical_leaders(network: &RoadNetwork, params: &SimParams, vehicles: &[VehicleState]) -> Vec<Leader> {
    let len = params.vehicle_length;
    let closed = network.is_closed();
    let coords: Vec<f64> = vehicles
        .iter()
        .map(|v| network.coordinate(v.route_id, v.route_pos))
        .collect();
    vehicles
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let route_len = network.coordinate_length();
            let mut best = Leader::none();
            let mut best_ahead = f64::INFINITY;
            for (j, c) in vehicles.iter().enumerate() {
                if j == i || !network.shares_lane(e.route_id, c.route_id, coords[j]) {
                    continue;
                }
                let ahead = if closed {
                    (coords[j] - coords[i]).rem_euclid(route_len)
                } else {
                    coords[j] - coords[i]
                };
                if ahead < 0.0 {
                    continue;
                }
                if ahead < best_ahead {
                    best_ahead = ahead;
                    best = Leader {
                        index: Some(j),
                        gap: ahead - len,
                        speed: c.speed,
                    };
                }
            }
            if closed && best.index.is_none() {
                best = Leader {
                    index: Some(i),
                    gap: route_len - len,
                    speed: e.speed,
                };
            }
            best
        })
        .collect()
}

/// Time headway (gap / speed, capped at [`MAX_HEADWAY`]) of every CAV in
/// `records`, in record order. Works from logged kinematics alone.
pub fn cav_headways(network: &RoadNetwork, params: &SimParams, records: &[VehicleRecord]) -> Vec<f64> {
    let vehicles: Vec<VehicleState> = records
        .iter()
        .map(|r| VehicleState {
            id: r.id,
            kind: r.kind,
            route_pos: r.route_pos,
            speed: r.speed,
            last_accel: r.accel,
            route_id: r.route_id,
        })
        .collect();
    let leaders = physical_leaders(network, params, &vehicles);
    vehicles
        .iter()
        .zip(&leaders)
        .filter(|(v, _)| v.kind == VehicleKind::Cav)
        .map(|(v, l)| {
            if l.gap <= 0.0 {
                0.0
            } else if l.gap.is_infinite() || v.speed <= 0.0 {
                MAX_HEADWAY
            } else {
                (l.gap / v.speed).min(MAX_HEADWAY)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn quiet_params() -> SimParams {
    let mut p = SimParams::default();
    p.idm.noise_mag = 0.0;
    p
}

fn zero_actions(state: &SimState) -> BTreeMap<u32, f64> {
    state.cav_ids().into_iter().map(|id| (id, 0.0)).collect()
}

#[test]
fn ring_places_vehicles_uniformly_at_rest() {
    let state = build_network(&RoadNetwork::ring(230.0), 6, 16, 0, &SimParams::default()).unwrap();
    assert_eq!(state.vehicles.len(), 22);
    assert_eq!(state.cav_ids().len(), 16);
    let spacing = 230.0 / 22.0;
    for (k, v) in state.vehicles.iter().enumerate() {
        assert!((v.route_pos - k as f64 * spacing).abs() < 1e-12);
        assert_eq!(v.speed, 0.0);
    }
    assert!(!state.collided);
}

#[test]
fn cav_placement_depends_on_seed_only() {
    let p = SimParams::default();
    let a = build_network(&RoadNetwork::ring(230.0), 6, 16, 3, &p).unwrap();
    let b = build_network(&RoadNetwork::ring(230.0), 6, 16, 3, &p).unwrap();
    let c = build_network(&RoadNetwork::ring(230.0), 6, 16, 4, &p).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.cav_ids(), c.cav_ids());
    assert_eq!(c.cav_ids().len(), 16);
}

#[test]
fn empty_network_rejected() {
    let err = build_network(&RoadNetwork::ring(230.0), 0, 0, 0, &SimParams::default()).unwrap_err();
    assert!(matches!(err, SimError::InvalidSpec(_)));
}

#[test]
fn overfull_ring_rejected() {
    let err = build_network(&RoadNetwork::ring(10.0), 11, 11, 0, &SimParams::default()).unwrap_err();
    assert!(matches!(err, SimError::CapacityExceeded { vehicles: 22, .. }));
}

#[test]
fn standstill_is_fixed_point() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 0, 5, 0, &quiet_params()).unwrap();
    let before = state.vehicles.clone();
    for _ in 0..10 {
        state.step(&zero_actions(&state), 0.1).unwrap();
    }
    for (a, b) in before.iter().zip(&state.vehicles) {
        assert_eq!(a.route_pos, b.route_pos);
        assert_eq!(b.speed, 0.0);
    }
}

#[test]
fn cav_command_is_clamped() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 0, 2, 0, &quiet_params()).unwrap();
    let ids = state.cav_ids();
    let actions = BTreeMap::from([(ids[0], 10.0), (ids[1], -10.0)]);
    let info = state.step(&actions, 0.1).unwrap();
    assert_eq!(info.records[0].accel, 3.0);
    assert_eq!(info.records[1].accel, -3.0);
    assert!((state.vehicles[0].speed - 0.3).abs() < 1e-15);
    assert_eq!(state.vehicles[1].speed, 0.0);
}

#[test]
fn missing_action_and_bad_dt_rejected() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 1, 2, 0, &quiet_params()).unwrap();
    assert!(matches!(state.step(&BTreeMap::new(), 0.1), Err(SimError::MissingAction(_))));
    let actions = zero_actions(&state);
    assert!(matches!(state.step(&actions, 0.0), Err(SimError::InvalidTimeStep(_))));
}

#[test]
fn equilibrium_ring_stays_uniform() {
    let params = quiet_params();
    let mut state = build_network(&RoadNetwork::ring(230.0), 22, 0, 0, &params).unwrap();
    let gap = 230.0 / 22.0 - params.vehicle_length;
    let v_eq = equilibrium_speed(gap, &params.idm).unwrap();
    for v in &mut state.vehicles {
        v.speed = v_eq;
    }
    for _ in 0..1000 {
        state.step(&BTreeMap::new(), 0.1).unwrap();
        let dev = state
            .vehicles
            .iter()
            .map(|v| (v.speed - v_eq).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-9, "deviation {dev}");
    }
}

#[test]
fn identical_positions_collide() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 2, 0, 0, &quiet_params()).unwrap();
    assert!(!state.detect_collision());
    state.vehicles[1].route_pos = state.vehicles[0].route_pos;
    assert!(state.detect_collision());
}

#[test]
fn figure_eight_crossing_occupancy_collides() {
    let params = quiet_params();
    let mut state = build_network(&RoadNetwork::figure_eight(), 2, 0, 0, &params).unwrap();
    // Interval-overlap oracle: a body [x-5, x] intersects the zone [66.5, 76.5].
    let occupies = |x: f64| x >= 66.5 && x - 5.0 <= 76.5;
    state.vehicles[0].route_pos = 70.0;
    state.vehicles[1].route_pos = 20.0;
    assert!(occupies(70.0) && !occupies(20.0));
    assert!(!state.detect_collision());
    state.vehicles[1].route_pos = 80.0;
    assert!(occupies(80.0));
    assert!(state.detect_collision());
    state.vehicles[1].route_pos = 82.0;
    assert!(!occupies(82.0));
    assert!(!state.detect_collision());
}

#[test]
fn ring_observations_are_symmetric() {
    let mut state = build_network(&RoadNetwork::ring(200.0), 4, 4, 0, &quiet_params()).unwrap();
    for v in &mut state.vehicles {
        v.speed = 4.0;
    }
    let obs = state.observations(8.0);
    assert_eq!(obs.len(), 4);
    for o in &obs {
        let f = o.features;
        assert_eq!(f[0], 0.5);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[4], 0.0);
        // CAVs alternate with humans: nearest CAV is two spacings away.
        assert!((f[3] - 50.0 / 200.0).abs() < 1e-12);
        assert!((f[5] - 50.0 / 200.0).abs() < 1e-12);
    }
}

#[test]
fn hand_built_three_cav_ring_observation() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 0, 3, 0, &quiet_params()).unwrap();
    let set = [(10.0, 2.0), (40.0, 5.0), (85.0, 1.0)];
    for (v, (x, s)) in state.vehicles.iter_mut().zip(set) {
        v.route_pos = x;
        v.speed = s;
    }
    let o = state.local_observation(state.vehicles[0].id, 10.0).unwrap().features;
    // leader at 40 (30 m ahead, +3 m/s), follower at 85 (25 m behind, -1 m/s)
    let expected = [0.2, 0.1, 0.3, 0.3, -0.1, 0.25];
    for (a, b) in o.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{o:?}");
    }
    let o = state.local_observation(state.vehicles[2].id, 10.0).unwrap().features;
    let expected = [0.1, 0.85, 0.1, 0.25, 0.4, 0.45];
    for (a, b) in o.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{o:?}");
    }
}

#[test]
fn unknown_vehicle_observation() {
    let state = build_network(&RoadNetwork::ring(100.0), 2, 1, 0, &quiet_params()).unwrap();
    let human = state.vehicles.iter().find(|v| v.kind == VehicleKind::Human).unwrap().id;
    assert!(matches!(state.local_observation(human, 8.0), Err(SimError::UnknownVehicle(_))));
    assert!(matches!(state.local_observation(99, 8.0), Err(SimError::UnknownVehicle(99))));
}

#[test]
fn single_merge_cav_uses_sentinels() {
    let mut params = quiet_params();
    params.penetration_rate = 1.0;
    let mut state = build_network(&RoadNetwork::merge(), 0, 0, 0, &params).unwrap();
    assert!(state.vehicles.is_empty());
    state.step(&BTreeMap::new(), 0.1).unwrap();
    let cavs = state.cav_ids();
    assert!(!cavs.is_empty());
    let lone = cavs[0];
    state.vehicles.retain(|v| v.id == lone);
    let f = state.local_observation(lone, 8.0).unwrap().features;
    assert_eq!(&f[2..], &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn merge_vehicles_spawn_and_exit() {
    let mut params = SimParams::default();
    params.penetration_rate = 0.0;
    let mut state = build_network(&RoadNetwork::merge(), 0, 0, 1, &params).unwrap();
    let (mut spawned, mut exited) = (0, 0);
    for _ in 0..1200 {
        let info = state.step(&BTreeMap::new(), 0.1).unwrap();
        spawned += info.spawned.len();
        exited += info.exited.len();
        assert!(!info.collided, "collision at step {}", info.time_step);
    }
    assert!(spawned > 30, "spawned {spawned}");
    assert!(exited > 10, "exited {exited}");
    assert!(state.vehicles.iter().any(|v| v.route_id == RAMP_ROUTE) || exited > 0);
}

#[test]
fn figure_eight_humans_mostly_avoid_collisions() {
    let params = SimParams::default();
    let mut collisions = 0;
    for seed in 0..5 {
        let mut state = build_network(&RoadNetwork::figure_eight(), 14, 0, seed, &params).unwrap();
        assert!(!state.collided);
        for _ in 0..1500 {
            if state.step(&BTreeMap::new(), 0.1).unwrap().collided {
                collisions += 1;
                break;
            }
        }
    }
    assert!(collisions <= 1, "{collisions} of 5 episodes collided");
}

#[test]
fn safety_clamp_prevents_rear_end() {
    let mut params = quiet_params();
    params.safety_clamp = true;
    let mut state = build_network(&RoadNetwork::ring(100.0), 2, 2, 0, &params).unwrap();
    for _ in 0..2000 {
        let actions = state.cav_ids().into_iter().map(|id| (id, 3.0)).collect();
        assert!(!state.step(&actions, 0.1).unwrap().collided);
    }
}

#[test]
fn headways_from_records() {
    let mut state = build_network(&RoadNetwork::ring(100.0), 2, 2, 0, &quiet_params()).unwrap();
    for v in &mut state.vehicles {
        v.speed = 5.0;
    }
    let h = cav_headways(state.network(), state.params(), &state.records());
    assert_eq!(h.len(), 2);
    for x in h {
        assert!((x - 20.0 / 5.0).abs() < 1e-12);
    }
    let cav = state.vehicles.iter_mut().find(|v| v.kind == VehicleKind::Cav).unwrap();
    cav.speed = 0.0;
    let h = cav_headways(state.network(), state.params(), &state.records());
    assert!(h.contains(&MAX_HEADWAY));
}

fn run(seed: u64, actions: &[f64], network: &RoadNetwork) -> Vec<SimState> {
    let mut params = SimParams::default();
    params.safety_clamp = true;
    let mut state = build_network(network, 3, 3, seed, &params).unwrap();
    let mut trace = vec![state.clone()];
    for a in actions {
        let cmd = state.cav_ids().into_iter().map(|id| (id, *a)).collect();
        state.step(&cmd, 0.1).unwrap();
        trace.push(state.clone());
    }
    trace
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deterministic_given_seed_and_actions(
        seed in 0u64..1000,
        actions in proptest::collection::vec(-4.0f64..4.0, 1..120),
    ) {
        let a = run(seed, &actions, &RoadNetwork::ring(80.0));
        let b = run(seed, &actions, &RoadNetwork::ring(80.0));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ring_order_speed_and_count_invariants(
        seed in 0u64..1000,
        actions in proptest::collection::vec(-4.0f64..4.0, 1..200),
    ) {
        let trace = run(seed, &actions, &RoadNetwork::ring(80.0));
        let order = |s: &SimState| {
            let mut idx: Vec<usize> = (0..s.vehicles.len()).collect();
            idx.sort_by(|&a, &b| s.vehicles[a].route_pos.total_cmp(&s.vehicles[b].route_pos));
            // cyclic order as the successor of each vehicle
            let mut next = vec![0; idx.len()];
            for k in 0..idx.len() {
                next[idx[k]] = idx[(k + 1) % idx.len()];
            }
            next
        };
        for pair in trace.windows(2) {
            prop_assert_eq!(pair[1].vehicles.len(), 6);
            prop_assert!(pair[1].vehicles.iter().all(|v| v.speed >= 0.0));
            prop_assert!(pair[1].vehicles.iter().all(|v| (0.0..80.0).contains(&v.route_pos)));
            for v in pair[1].vehicles.iter().filter(|v| v.kind == VehicleKind::Cav) {
                prop_assert!((-3.0..=3.0).contains(&v.last_accel));
            }
            if !pair[1].collided {
                prop_assert_eq!(order(&pair[0]), order(&pair[1]));
            }
        }
    }
}

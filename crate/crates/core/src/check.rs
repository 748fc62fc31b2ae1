//! Self-check suite: gradient, normalisation, adjacency, clipping, replay
//! and equilibrium invariants over randomised instances.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_adjacency, gaussian_kernel, AdjacencyScheme, KernelSpec};
use crate::nn::gradcheck::check_gradients;
use crate::nn::{
    gaussian_log_density, Activation, Architecture, AttentionKind, AttentionLayer, Dense, GraphBatch,
    GraphConvLayer, NnError, ParamStore, Policy, Tape, Var,
};
use crate::scenario::{Env, GraphConfig, ScenarioConfig};
use crate::sim::trajectory::{read_routes, read_trajectory, write_routes, write_trajectory};
use crate::sim::{build_network, equilibrium_speed, RoadNetwork, SimParams, SimState};
use crate::tensor::Tensor;
use crate::trainer::ppo::{clipped_surrogate, td_loss};
use crate::trainer::{ActionMode, EpisodeRunner, RewardWeights};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Ring with `humans + cavs` vehicles at random positions and speeds.
pub fn random_ring_state(rng: &mut ChaCha8Rng, length: f64, humans: usize, cavs: usize) -> SimState {
    let mut state = build_network(&RoadNetwork::ring(length), humans, cavs, rng.random(), &SimParams::default())
        .expect("ring fits");
    let mut pos: Vec<f64> = (0..state.vehicles.len()).map(|_| rng.random_range(0.0..length)).collect();
    pos.sort_by(f64::total_cmp);
    for (v, x) in state.vehicles.iter_mut().zip(pos) {
        v.route_pos = x;
        v.speed = rng.random_range(0.0..15.0);
    }
    state
}

fn random_decision_env(rng: &mut ChaCha8Rng, scenario: &ScenarioConfig, graph: &GraphConfig) -> (Tensor, GraphBatch) {
    let reward = RewardWeights::default().spec(&scenario.network, scenario.target_speed);
    let mut env = Env::new(scenario, graph, reward, 0).expect("valid scenario");
    let RoadNetwork::Ring { length } = scenario.network else {
        unreachable!("ring scenario")
    };
    env.state = random_ring_state(rng, length, scenario.humans, scenario.cavs);
    let d = env.decision().expect("decision").expect("CAVs present");
    (d.obs, GraphBatch::single(&d.adjacency))
}

fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var, NnError> {
    let rv = tape.input(r.clone())?;
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

fn small_scenario() -> (ScenarioConfig, GraphConfig) {
    let scenario = ScenarioConfig {
        network: RoadNetwork::ring(120.0),
        humans: 3,
        cavs: 5,
        ..ScenarioConfig::default()
    };
    let graph = GraphConfig {
        scan_scale: 40.0,
        ..GraphConfig::default()
    };
    (scenario, graph)
}

fn max_over(instances: u64, f: impl Fn(u64) -> Result<f64, NnError>) -> Result<f64, NnError> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        worst = worst.max(f(k)?);
    }
    Ok(worst)
}

fn grad_outcome(name: &'static str, instances: u64, r: Result<f64, NnError>) -> CheckOutcome {
    match r {
        Ok(err) => CheckOutcome::new(
            name,
            err < GRAD_TOLERANCE,
            format!("max relative error {err:.2e} over {instances} instances"),
        ),
        Err(e) => CheckOutcome::new(name, false, e.to_string()),
    }
}

/// Central finite-difference checks of every layer and both losses.
pub fn gradient_suite(instances: u64) -> Vec<CheckOutcome> {
    let (scenario, graph_cfg) = small_scenario();
    let arch = Architecture {
        hidden: 8,
        heads: 2,
        ..Architecture::default()
    };
    let mut out = Vec::new();

    out.push(grad_outcome(
        "gradient: dense",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let mut store = ParamStore::new();
            let x = store.add("x", random(&mut rng, 5, 4, 1.0));
            let dense = Dense::new(&mut store, "dense", 4, 3, 1.0, true, &mut rng);
            let r = random(&mut rng, 5, 3, 1.0);
            Ok(check_gradients(&store, FD_STEP, &|tape, b| {
                let y = dense.forward(tape, b, b.var(x))?;
                let y = tape.tanh(y)?;
                project(tape, y, &r)
            })?
            .max_rel_error)
        }),
    ));

    out.push(grad_outcome(
        "gradient: graph convolution",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
            let (obs, g) = random_decision_env(&mut rng, &scenario, &graph_cfg);
            let g = Arc::new(g);
            let mut store = ParamStore::new();
            let x = store.add("x", obs);
            let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let conv = GraphConvLayer::new(&mut store, "gc", 6, 5, act, &mut rng);
            let r = random(&mut rng, scenario.cavs, 5, 1.0);
            Ok(check_gradients(&store, FD_STEP, &|tape, b| {
                let y = conv.forward(tape, b, b.var(x), &g)?;
                project(tape, y, &r)
            })?
            .max_rel_error)
        }),
    ));

    out.push(grad_outcome(
        "gradient: attention",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + k);
            let (_, g) = random_decision_env(&mut rng, &scenario, &graph_cfg);
            let g = Arc::new(g);
            let mut store = ParamStore::new();
            let x = store.add("x", random(&mut rng, scenario.cavs, 8, 1.0));
            let heads = [1, 2, 4][k as usize % 3];
            let att = AttentionLayer::new(&mut store, "att", 8, heads, AttentionKind::Softmax, &mut rng)?;
            let r = random(&mut rng, scenario.cavs, 8, 1.0);
            Ok(check_gradients(&store, FD_STEP, &|tape, b| {
                let (y, _) = att.forward(tape, b, b.var(x), &g)?;
                project(tape, y, &r)
            })?
            .max_rel_error)
        }),
    ));

    out.push(grad_outcome(
        "gradient: gaussian head",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + k);
            let mut store = ParamStore::new();
            let mean = store.add("mean", random(&mut rng, 6, 1, 2.0));
            let log_spread = store.add("log_spread", random(&mut rng, 1, 1, 0.5));
            let action = random(&mut rng, 6, 1, 3.0);
            Ok(check_gradients(&store, FD_STEP, &|tape, b| {
                let a = tape.input(action.clone())?;
                let lp = gaussian_log_density(tape, a, b.var(mean), b.var(log_spread))?;
                tape.sum(lp)
            })?
            .max_rel_error)
        }),
    ));

    out.push(grad_outcome(
        "gradient: clipped surrogate through actor",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + k);
            let (obs, g) = random_decision_env(&mut rng, &scenario, &graph_cfg);
            let g = Arc::new(g);
            let mut policy = Policy::new(arch, k)?;
            for p in policy.actor.params_mut() {
                if p.name == "actor.mean.weight" {
                    p.value = random(&mut rng, arch.hidden, 1, 1.0);
                }
            }
            let n = obs.rows();
            let action = random(&mut rng, n, 1, 2.0);
            let adv = random(&mut rng, n, 1, 1.0);
            // Old log-probabilities place ratios inside and outside the band,
            // away from the kinks.
            let current = {
                let mut tape = Tape::new();
                let b = policy.actor.bind(&mut tape)?;
                let o = policy.actor_forward(&mut tape, &b, &obs, &g)?;
                let a = tape.input(action.clone())?;
                let lp = gaussian_log_density(&mut tape, a, o.mean, o.log_spread)?;
                tape.value(lp).clone()
            };
            let old: Vec<f64> = current
                .data()
                .iter()
                .map(|lp| loop {
                    let ratio: f64 = rng.random_range(0.5..1.6);
                    if (ratio - 0.8).abs() > 0.02 && (ratio - 1.2).abs() > 0.02 {
                        break lp - ratio.ln();
                    }
                })
                .collect();
            let old = Tensor::from_vec(n, 1, old);
            let actor = policy.clone();
            Ok(check_gradients(&policy.actor, FD_STEP, &|tape, b| {
                let o = actor.actor_forward(tape, b, &obs, &g)?;
                let a = tape.input(action.clone())?;
                let lp = gaussian_log_density(tape, a, o.mean, o.log_spread)?;
                clipped_surrogate(tape, lp, &old, &adv, 0.2)
            })?
            .max_rel_error)
        }),
    ));

    out.push(grad_outcome(
        "gradient: temporal-difference critic loss",
        instances,
        max_over(instances, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + k);
            let (obs, g) = random_decision_env(&mut rng, &scenario, &graph_cfg);
            let g = Arc::new(g);
            let policy = Policy::new(arch, k)?;
            let targets = random(&mut rng, obs.rows(), 1, 2.0);
            let critic = policy.clone();
            Ok(check_gradients(&policy.critic, FD_STEP, &|tape, b| {
                let v = critic.critic_forward(tape, b, &obs, &g)?;
                td_loss(tape, v, &targets)
            })?
            .max_rel_error)
        }),
    ));
    out
}

/// Attention rows sum to one and vanish outside each neighbour set.
pub fn attention_normalization(states: u64) -> CheckOutcome {
    let name = "attention normalization";
    let mut worst_sum = 0.0f64;
    let mut leaks = 0usize;
    for k in 0..states {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + k);
        let cavs = rng.random_range(1..10);
        let scenario = ScenarioConfig {
            network: RoadNetwork::ring(rng.random_range(110.0..300.0)),
            humans: rng.random_range(0..6),
            cavs,
            ..ScenarioConfig::default()
        };
        let graph = GraphConfig {
            scan_scale: rng.random_range(5.0..60.0),
            ..GraphConfig::default()
        };
        let (obs, g) = random_decision_env(&mut rng, &scenario, &graph);
        let g = Arc::new(g);
        let arch = Architecture {
            hidden: 16,
            heads: [1, 2, 4, 8][k as usize % 4],
            ..Architecture::default()
        };
        let Ok(policy) = Policy::new(arch, k) else {
            return CheckOutcome::new(name, false, "policy construction failed".into());
        };
        let mut tape = Tape::new();
        let result = policy
            .actor
            .bind(&mut tape)
            .and_then(|b| policy.actor_forward(&mut tape, &b, &obs, &g));
        let out = match result {
            Ok(o) => o,
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        };
        let block = &g.blocks()[0];
        for head in out.attention {
            let phi = &tape.attention_weights(head).expect("attention node")[0];
            for i in 0..block.size {
                let s: f64 = phi.row(i).iter().sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                for j in 0..block.size {
                    if !block.mask[i * block.size + j] && phi.get(i, j) != 0.0 {
                        leaks += 1;
                    }
                }
            }
        }
    }
    CheckOutcome::new(
        name,
        worst_sum < 1e-9 && leaks == 0,
        format!("max |Σφ - 1| {worst_sum:.1e}, {leaks} nonzero weights outside neighbour sets, {states} states"),
    )
}

/// Mask soundness, kernel symmetry, antisymmetry and independent
/// recomputation of every kernel-weighted entry.
pub fn adjacency_properties(states: u64) -> CheckOutcome {
    let name = "adjacency correctness";
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for k in 0..states {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + k);
        let length = rng.random_range(130.0..400.0);
        let (humans, cavs) = (rng.random_range(0..6), rng.random_range(1..12));
        let state = random_ring_state(&mut rng, length, humans, cavs);
        let kernel = KernelSpec {
            amplitude: rng.random_range(0.5..2.0),
            length_scale: rng.random_range(1.0..10.0),
        };
        let sc = rng.random_range(2.0..80.0);
        let adj = match build_adjacency(&state, &AdjacencyScheme::GaussianSpeedField { kernel }, sc) {
            Ok(a) => a,
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        };
        let cavs: Vec<_> = state.vehicles.iter().filter(|v| v.kind == crate::sim::VehicleKind::Cav).collect();
        for (i, a) in cavs.iter().enumerate() {
            for (j, b) in cavs.iter().enumerate() {
                let w = adj.weights.get(i, j);
                let raw = (a.route_pos - b.route_pos).abs() % length;
                let d = raw.min(length - raw);
                if i == j {
                    if w != 1.0 {
                        failures.push(format!("state {k}: diagonal {w}"));
                    }
                    continue;
                }
                let network = state.network();
                if gaussian_kernel(network, a.route_pos, b.route_pos, &kernel)
                    != gaussian_kernel(network, b.route_pos, a.route_pos, &kernel)
                {
                    failures.push(format!("state {k}: kernel asymmetric at ({i},{j})"));
                }
                if w != -adj.weights.get(j, i) {
                    failures.push(format!("state {k}: entry ({i},{j}) not antisymmetric"));
                }
                if d > sc {
                    if w != 0.0 || adj.mask[i][j] {
                        failures.push(format!("state {k}: ({i},{j}) beyond scan scale is {w}"));
                    }
                } else {
                    let expected = (-d * d / (2.0 * kernel.length_scale * kernel.length_scale)).exp() * (b.speed - a.speed);
                    let err = (w - expected).abs();
                    worst = worst.max(err);
                    if err > 1e-12 {
                        failures.push(format!("state {k}: ({i},{j}) = {w}, expected {expected}"));
                    }
                }
            }
        }
    }
    CheckOutcome::new(
        name,
        failures.is_empty(),
        match failures.first() {
            Some(f) => format!("{} failures, first: {f}", failures.len()),
            None => format!("{states} states, max entry error {worst:.1e}"),
        },
    )
}

/// In-band ratios reproduce the plain surrogate; out-of-band samples on
/// the disadvantageous side get zero gradient, confirmed by finite
/// differences.
pub fn clip_semantics(instances: u64) -> CheckOutcome {
    let name = "clip semantics";
    let clip = 0.2;
    let mut problems = Vec::new();
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + k);
        let n = 8;
        let adv = random(&mut rng, n, 1, 2.0);
        let old = random(&mut rng, n, 1, 1.0);

        // (a) in band: ρ ∈ [1 - ε, 1 + ε].
        let lp_in: Vec<f64> = (0..n)
            .map(|i| old.get(i, 0) + rng.random_range((1.0 - clip + 1e-3f64).ln()..(1.0 + clip - 1e-3f64).ln()))
            .collect();
        let mut tape = Tape::new();
        let l = tape.input(Tensor::from_vec(n, 1, lp_in.clone())).expect("finite");
        let s = clipped_surrogate(&mut tape, l, &old, &adv, clip).expect("finite");
        let plain: f64 = (0..n).map(|i| (lp_in[i] - old.get(i, 0)).exp() * adv.get(i, 0)).sum();
        if (tape.value(s).item() - plain).abs() > 1e-12 * plain.abs().max(1.0) {
            problems.push(format!("instance {k}: in-band surrogate differs from plain"));
        }

        // (b) disadvantageous out-of-band samples: ρ > 1 + ε with Â > 0 or
        // ρ < 1 - ε with Â < 0. A parameter θ shifts every log-probability.
        let mut store = ParamStore::new();
        let theta = store.add("theta", Tensor::zeros(1, 1));
        let base: Vec<f64> = (0..n)
            .map(|i| {
                let ratio = if adv.get(i, 0) > 0.0 {
                    rng.random_range(1.3..2.0)
                } else {
                    rng.random_range(0.2..0.7)
                };
                old.get(i, 0) + f64::ln(ratio)
            })
            .collect();
        let base = Tensor::from_vec(n, 1, base);
        let loss = |tape: &mut Tape, b: &crate::nn::Bound| -> Result<Var, NnError> {
            let shift = tape.broadcast(b.var(theta), n, 1)?;
            let lp0 = tape.input(base.clone())?;
            let lp = tape.add(lp0, shift)?;
            clipped_surrogate(tape, lp, &old, &adv, clip)
        };
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).expect("finite");
        let out = loss(&mut tape, &b).expect("finite");
        let grads = tape.backward(out).expect("scalar");
        let analytic = grads.get(b.var(theta)).map_or(0.0, |g| g.item());
        let fd = check_gradients(&store, FD_STEP, &loss).expect("finite");
        if analytic != 0.0 || fd.max_rel_error > GRAD_TOLERANCE {
            problems.push(format!(
                "instance {k}: saturated gradient {analytic}, finite-difference error {:.1e}",
                fd.max_rel_error
            ));
        }
    }
    CheckOutcome::new(
        name,
        problems.is_empty(),
        problems
            .first()
            .cloned()
            .unwrap_or_else(|| format!("{instances} constructed batches")),
    )
}

/// Rewards of logged episodes equal the rewards recomputed from the
/// exported trajectory CSV.
pub fn reward_replay(scenarios: &[ScenarioConfig], seed: u64) -> CheckOutcome {
    let name = "reward replay";
    let graph = GraphConfig::default();
    let mut compared = 0;
    for (k, scenario) in scenarios.iter().enumerate() {
        let reward = RewardWeights::default().spec(&scenario.network, scenario.target_speed);
        let arch = Architecture::default();
        let policy = match Policy::new(arch, seed) {
            Ok(p) => p,
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        };
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut runner = match EpisodeRunner::new(scenario, &graph, reward, 0, seed + k as u64, rng, true) {
            Ok(r) => r,
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        };
        while !runner.finished() {
            if let Err(e) = runner.advance(Some(&policy), ActionMode::Sample) {
                return CheckOutcome::new(name, false, e.to_string());
            }
        }
        let rewards = runner.rewards().to_vec();
        let log = runner.take_log();
        let (mut csv, mut route_csv) = (Vec::new(), Vec::new());
        let logged = write_trajectory(&mut csv, &log)
            .and_then(|_| write_routes(&mut route_csv, &log))
            .and_then(|_| read_routes(route_csv.as_slice()))
            .and_then(|routes| read_trajectory(csv.as_slice(), Some(&routes)));
        let logged = match logged {
            Ok(l) => l,
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        };
        let replayed = crate::eval::replay_rewards(&reward, &scenario.network, &scenario.sim, &logged, rewards.len());
        if let Some(i) = (0..rewards.len()).find(|&i| rewards[i] != replayed[i]) {
            return CheckOutcome::new(
                name,
                false,
                format!("scenario {k} step {i}: stored {} replayed {}", rewards[i], replayed[i]),
            );
        }
        compared += rewards.len();
    }
    CheckOutcome::new(name, true, format!("{compared} rewards replayed exactly"))
}

/// Noise-free ring started at the uniform equilibrium stays uniform.
pub fn idm_equilibrium(steps: usize) -> CheckOutcome {
    let name = "IDM equilibrium";
    let mut params = SimParams::default();
    params.idm.noise_mag = 0.0;
    let length = 230.0;
    let n = 22;
    let mut state = match build_network(&RoadNetwork::ring(length), n, 0, 0, &params) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::new(name, false, e.to_string()),
    };
    let gap = length / n as f64 - params.vehicle_length;
    let v_eq = match equilibrium_speed(gap, &params.idm) {
        Ok(v) => v,
        Err(e) => return CheckOutcome::new(name, false, e.to_string()),
    };
    for v in &mut state.vehicles {
        v.speed = v_eq;
    }
    let mut worst = 0.0f64;
    for _ in 0..steps {
        if let Err(e) = state.step(&BTreeMap::new(), 0.1) {
            return CheckOutcome::new(name, false, e.to_string());
        }
        for v in &state.vehicles {
            worst = worst.max((v.speed - v_eq).abs());
        }
    }
    CheckOutcome::new(
        name,
        worst < 1e-9,
        format!("max speed deviation {worst:.1e} m/s over {steps} steps at {v_eq:.4} m/s"),
    )
}

/// Every check at the sizes used by the `check` command.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = vec![idm_equilibrium(1000)];
    out.extend(gradient_suite(20));
    out.push(attention_normalization(200));
    out.push(adjacency_properties(200));
    out.push(clip_semantics(20));
    let ring = ScenarioConfig {
        humans: 6,
        cavs: 4,
        horizon: 300,
        ..ScenarioConfig::default()
    };
    let merge = ScenarioConfig {
        network: RoadNetwork::merge(),
        horizon: 600,
        ..ScenarioConfig::default()
    };
    let eight = ScenarioConfig {
        network: RoadNetwork::figure_eight(),
        humans: 8,
        cavs: 6,
        horizon: 300,
        ..ScenarioConfig::default()
    };
    out.push(reward_replay(&[ring, eight, merge], 0));
    out
}

use cavg::nn::{load_checkpoint, save_checkpoint, Architecture, Policy};
use cavg::scenario::{GraphConfig, ScenarioConfig};
use cavg::seeding::{derive_rng, derive_seed, ENV_STREAM};
use cavg::sim::RoadNetwork;
use cavg::trainer::advantage::buffer_returns;
use cavg::trainer::{train, ActionMode, EpisodeRunner, PpoConfig, RewardWeights, StepSample, TrainSetup};

fn tiny_setup() -> TrainSetup {
    let mut scenario = ScenarioConfig {
        network: RoadNetwork::ring(6.0 * 230.0 / 22.0),
        humans: 2,
        cavs: 4,
        horizon: 80,
        ..ScenarioConfig::default()
    };
    scenario.sim.safety_clamp = true;
    let reward = RewardWeights::default().spec(&scenario.network, scenario.target_speed);
    TrainSetup {
        scenario,
        graph: GraphConfig::default(),
        reward,
        arch: Architecture {
            hidden: 16,
            heads: 2,
            ..Architecture::default()
        },
        ppo: PpoConfig {
            episodes: 3,
            batch_size: 120,
            minibatch_size: 40,
            epochs: 3,
            ..PpoConfig::default()
        },
    }
}

fn no_observer() -> impl FnMut(&cavg::trainer::EpisodeRecord, &Policy) -> Result<(), cavg::trainer::TrainError> {
    |_, _| Ok(())
}

#[test]
fn training_is_deterministic() {
    let setup = tiny_setup();
    let a = train(&setup, 11, &mut no_observer()).unwrap();
    let b = train(&setup, 11, &mut no_observer()).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.policy.actor.flatten(), b.policy.actor.flatten());
    assert_eq!(a.policy.critic.flatten(), b.policy.critic.flatten());
    let c = train(&setup, 12, &mut no_observer()).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn updates_fire_per_batch_and_on_leftovers() {
    let setup = tiny_setup();
    let out = train(&setup, 3, &mut no_observer()).unwrap();
    // 3 episodes × 80 steps × 4 agents = 960 tuples, 120 per batch.
    assert_eq!(out.updates.len(), 8);
    assert!(out.updates.iter().all(|u| u.tuples == 120));
    let mut odd = setup.clone();
    odd.ppo.batch_size = 500;
    let out = train(&odd, 3, &mut no_observer()).unwrap();
    assert_eq!(out.updates.iter().map(|u| u.tuples).collect::<Vec<_>>(), vec![500, 460]);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut setup = tiny_setup();
    setup.ppo.actor_lr = 0.0;
    setup.ppo.critic_lr = 0.0;
    let initial = Policy::new(setup.arch, 5).unwrap();
    let out = cavg::trainer::train_from(&setup, 5, initial.clone(), &mut no_observer()).unwrap();
    assert_eq!(out.policy.actor.flatten(), initial.actor.flatten());
    assert_eq!(out.policy.critic.flatten(), initial.critic.flatten());
}

#[test]
fn checkpoint_resume_reproduces_rollouts() {
    let setup = tiny_setup();
    let out = train(&setup, 2, &mut no_observer()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &out.policy).unwrap();
    let loaded = load_checkpoint(&path, Some(&setup.arch)).unwrap();

    let rollout = |policy: &Policy| {
        let mut runner = EpisodeRunner::new(
            &setup.scenario,
            &setup.graph,
            setup.reward,
            7,
            derive_seed(2, ENV_STREAM, 7),
            derive_rng(2, cavg::seeding::ACTION_STREAM, 7),
            true,
        )
        .unwrap();
        let mut actions = Vec::new();
        while !runner.finished() {
            if let Some(s) = runner.advance(Some(policy), ActionMode::Sample).unwrap() {
                actions.extend(s.actions);
            }
        }
        (actions, runner.rewards().to_vec(), runner.take_log())
    };
    assert_eq!(rollout(&out.policy), rollout(&loaded));
}

#[test]
fn shared_parameters_act_identically_on_identical_agents() {
    // One actor parameter set serves every agent: two isolated agents with
    // the same observation get the same action as a lone agent.
    let setup = tiny_setup();
    let policy = Policy::new(setup.arch, 1).unwrap();
    let mut runner = setup.runner(1, 0, false).unwrap();
    let s = runner.advance(Some(&policy), ActionMode::Mean).unwrap().unwrap();
    let single = |i: usize| {
        let mut adj = s.adjacency.clone();
        adj.weights = cavg::tensor::Tensor::identity(1);
        adj.agent_ids = vec![s.agent_ids[i]];
        adj.degree = vec![1.0];
        adj.mask = vec![vec![true]];
        let obs = cavg::tensor::Tensor::from_vec(1, s.obs.cols(), s.obs.row(i).to_vec());
        policy
            .act_mean(&obs, &std::sync::Arc::new(cavg::nn::GraphBatch::single(&adj)))
            .unwrap()
            .item()
    };
    let a = single(0);
    let mut twin = s.obs.clone();
    let row0 = s.obs.row(0).to_vec();
    for (c, v) in row0.into_iter().enumerate() {
        twin.set(1, c, v);
    }
    let adj = {
        let mut adj = s.adjacency.clone();
        adj.weights = cavg::tensor::Tensor::identity(s.agent_ids.len());
        adj.degree = vec![1.0; s.agent_ids.len()];
        adj.mask = (0..s.agent_ids.len())
            .map(|i| (0..s.agent_ids.len()).map(|j| i == j).collect())
            .collect();
        adj
    };
    let out = policy
        .act_mean(&twin, &std::sync::Arc::new(cavg::nn::GraphBatch::single(&adj)))
        .unwrap();
    assert_eq!(out.get(0, 0), out.get(1, 0));
    assert_eq!(out.get(0, 0), a);
}

fn collect(setup: &TrainSetup, policy: &Policy, episodes: usize) -> Vec<StepSample> {
    let mut samples = Vec::new();
    for e in 0..episodes {
        let mut runner = setup.runner(9, e, false).unwrap();
        while !runner.finished() {
            if let Some(s) = runner.advance(Some(policy), ActionMode::Sample).unwrap() {
                samples.push(s);
            }
        }
    }
    samples
}

#[test]
fn returns_telescope_within_chains() {
    let setup = tiny_setup();
    let policy = Policy::new(setup.arch, 4).unwrap();
    let samples = collect(&setup, &policy, 2);
    let total: usize = samples.iter().map(|s| s.agent_ids.len()).sum();
    let next: Vec<f64> = (0..total).map(|k| (k as f64 * 0.37).sin()).collect();
    let gamma = 0.9;
    let g = buffer_returns(&samples, gamma, 0.5, &next);
    let mut row = 0;
    let mut chained = 0;
    for (idx, s) in samples.iter().enumerate() {
        for k in 0..s.agent_ids.len() {
            let r = 0.5 * s.reward;
            let expected_tail = match samples.get(idx + 1) {
                Some(n) if n.episode == s.episode && n.time_step == s.time_step + 1 && !s.done[k] => {
                    let j = n.agent_ids.iter().position(|&a| a == s.agent_ids[k]).unwrap();
                    chained += 1;
                    let next_row: usize = samples[..=idx].iter().map(|x| x.agent_ids.len()).sum::<usize>() + j;
                    g[next_row]
                }
                _ if s.done[k] => 0.0,
                _ => next[row + k],
            };
            assert!((g[row + k] - r - gamma * expected_tail).abs() < 1e-12);
        }
        row += s.agent_ids.len();
    }
    assert!(chained > 0);
    // The episode boundary closes with a bootstrap rather than chaining into
    // the next episode.
    let last_of_first = samples.iter().rposition(|s| s.episode == 0).unwrap();
    let start: usize = samples[..last_of_first].iter().map(|x| x.agent_ids.len()).sum();
    assert!((g[start] - 0.5 * samples[last_of_first].reward - gamma * next[start]).abs() < 1e-12);
}

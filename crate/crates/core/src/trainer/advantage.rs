//! Discounted reward-to-go and advantages.

use std::collections::HashMap;

use super::rollout::StepSample;

/// `G_t = Σ_{k≥t} γ^{k-t} r_k + γ^{T-t} bootstrap` for one agent's sequence.
pub fn reward_to_go(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = bootstrap;
    for (t, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[t] = g;
    }
    out
}

/// Shift to zero mean and scale to unit standard deviation. Batches with
/// (near) zero spread are only centred.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 1e-8 {
            *v /= std;
        }
    }
}

/// Per-agent reward-to-go for every tuple of a buffer, flattened in sample
/// order.
///
/// An agent's chain continues into the next sample when that sample is the
/// next step of the same episode and still contains the agent. A chain that
/// ends without a done flag (horizon, buffer cut, or the agent missing next
/// step for another reason) is closed with `next_values`, the critic's value
/// of the next state under the same adjacency. Done tuples close with 0.
pub fn buffer_returns(samples: &[StepSample], gamma: f64, reward_scale: f64, next_values: &[f64]) -> Vec<f64> {
    let offsets = tuple_offsets(samples);
    let total = offsets.last().copied().unwrap_or(0);
    assert_eq!(next_values.len(), total, "one next-state value per tuple");
    let mut out = vec![0.0; total];
    let mut ahead: HashMap<u32, f64> = HashMap::new();
    for idx in (0..samples.len()).rev() {
        let s = &samples[idx];
        let chained = samples
            .get(idx + 1)
            .is_some_and(|n| n.episode == s.episode && n.time_step == s.time_step + 1);
        let mut here = HashMap::with_capacity(s.agent_ids.len());
        for (k, &id) in s.agent_ids.iter().enumerate() {
            let row = offsets[idx] + k;
            let r = reward_scale * s.reward;
            let g = if s.done[k] {
                r
            } else {
                match ahead.get(&id).filter(|_| chained) {
                    Some(next) => r + gamma * next,
                    None => r + gamma * next_values[row],
                }
            };
            out[row] = g;
            here.insert(id, g);
        }
        ahead = here;
    }
    out
}

/// Start row of every sample plus the total tuple count.
pub fn tuple_offsets(samples: &[StepSample]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    let mut at = 0;
    offsets.push(0);
    for s in samples {
        at += s.agent_ids.len();
        offsets.push(at);
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let g = reward_to_go(&[1.0], 0.5, 0.0);
        assert_eq!(g, vec![1.0]);
        assert!((g[0] - 0.3 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn three_step_geometric_sum() {
        let r = [1.0, -2.0, 4.0];
        let g = reward_to_go(&r, 0.9, 0.0);
        let expected = [r[0] + 0.9 * r[1] + 0.81 * r[2], r[1] + 0.9 * r[2], r[2]];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let boot = reward_to_go(&r, 0.9, 10.0);
        assert!((boot[2] - (4.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut v);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
        let mut flat = vec![2.0, 2.0];
        normalize(&mut flat);
        assert_eq!(flat, vec![0.0, 0.0]);
    }
}

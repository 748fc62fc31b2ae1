//! Clipped surrogate and temporal-difference losses.

use crate::nn::{NnError, Tape, Var};
use crate::tensor::Tensor;

/// `Σ min(ρ Â, clip(ρ, 1-ε, 1+ε) Â)` with `ρ = exp(log π - log π_old)`.
pub fn clipped_surrogate(
    tape: &mut Tape,
    log_prob: Var,
    old_log_prob: &Tensor,
    advantages: &Tensor,
    clip: f64,
) -> Result<Var, NnError> {
    let old = tape.input(old_log_prob.clone())?;
    let adv = tape.input(advantages.clone())?;
    let diff = tape.sub(log_prob, old)?;
    let ratio = tape.exp(diff)?;
    let plain = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(plain, clipped)?;
    tape.sum(surrogate)
}

/// `Σ (target - V)²` with the targets held constant.
pub fn td_loss(tape: &mut Tape, values: Var, targets: &Tensor) -> Result<Var, NnError> {
    let t = tape.input(targets.clone())?;
    let err = tape.sub(t, values)?;
    let sq = tape.mul(err, err)?;
    tape.sum(sq)
}

/// TD(0) targets `r + γ (1 - done) V(S', M)`.
pub fn td_targets(rewards: &[f64], done: &[bool], next_values: &[f64], gamma: f64) -> Tensor {
    let data = rewards
        .iter()
        .zip(done)
        .zip(next_values)
        .map(|((r, d), v)| if *d { *r } else { r + gamma * v })
        .collect::<Vec<_>>();
    Tensor::from_vec(data.len(), 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surrogate_value(lp: &[f64], old: &[f64], adv: &[f64], clip: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::from_vec(lp.len(), 1, lp.to_vec())).unwrap();
        let o = Tensor::from_vec(old.len(), 1, old.to_vec());
        let a = Tensor::from_vec(adv.len(), 1, adv.to_vec());
        let s = clipped_surrogate(&mut tape, l, &o, &a, clip).unwrap();
        tape.value(s).item()
    }

    #[test]
    fn ratio_one_sums_advantages() {
        let v = surrogate_value(&[0.3, -1.0], &[0.3, -1.0], &[2.0, -0.5], 0.2);
        assert_eq!(v, 1.5);
    }

    #[test]
    fn hand_built_two_sample_batch() {
        // ρ = 1.5 with Â = 1 clips to 1.2; ρ = 0.5 with Â = -2 clips to 0.8 → min(-1, -1.6).
        let lp = [1.5f64.ln(), 0.5f64.ln()];
        let v = surrogate_value(&lp, &[0.0, 0.0], &[1.0, -2.0], 0.2);
        let expected = (1.5f64 * 1.0).min(1.2 * 1.0) + (0.5f64 * -2.0).min(0.8 * -2.0);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_sample_has_zero_gradient() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::from_rows(&[[1.4f64.ln()], [0.1f64.ln()]])).unwrap();
        let s = clipped_surrogate(
            &mut tape,
            l,
            &Tensor::zeros(2, 1),
            &Tensor::from_rows(&[[1.0], [1.0]]),
            0.2,
        )
        .unwrap();
        let g = tape.backward(s).unwrap();
        let gl = g.get(l).unwrap();
        assert_eq!(gl.get(0, 0), 0.0);
        // ρ = 0.1 < 1 - ε with Â > 0 is the advantageous side: unclipped term, dρ/dlogπ = ρ.
        assert!((gl.get(1, 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn terminal_target_is_reward() {
        let t = td_targets(&[1.0, 2.0], &[true, false], &[5.0, 5.0], 0.9);
        assert_eq!(t.data(), &[1.0, 2.0 + 4.5]);
    }

    #[test]
    fn td_loss_sums_squares() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::from_rows(&[[1.0], [3.0]])).unwrap();
        let l = td_loss(&mut tape, v, &Tensor::from_rows(&[[2.0], [1.0]])).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
    }
}

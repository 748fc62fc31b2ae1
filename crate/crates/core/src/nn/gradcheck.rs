//! Central finite-difference gradient checks.

use super::layers::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::NnError;

/// Denominators smaller than this are floored, so entries whose true
/// gradient is zero up to rounding are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval(store: &ParamStore, loss: &dyn Fn(&mut Tape, &Bound) -> Result<Var, NnError>) -> Result<f64, NnError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    Ok(tape.value(l).item())
}

/// Compare reverse-mode gradients of `loss` with respect to every entry of
/// `store` against `(f(θ + h) − f(θ − h)) / 2h`.
pub fn check_gradients(
    store: &ParamStore,
    h: f64,
    loss: &dyn Fn(&mut Tape, &Bound) -> Result<Var, NnError>,
) -> Result<GradCheckReport, NnError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    let grads = tape.backward(l)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, param) in store.params().iter().enumerate() {
        let analytic = grads.get(bound.var(pi));
        for k in 0..param.value.len() {
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            let x = param.value.data()[k];
            probe.params_mut()[pi].value.data_mut()[k] = x + h;
            let up = eval(&probe, loss)?;
            probe.params_mut()[pi].value.data_mut()[k] = x - h;
            let down = eval(&probe, loss)?;
            probe.params_mut()[pi].value.data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((param.name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_passes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[[0.3, -1.2], [0.7, 2.0]]));
        store.add("x", Tensor::from_rows(&[[1.5], [-0.4]]));
        let report = check_gradients(&store, 1e-5, &|tape, b| {
            let y = tape.matmul(b.var(0), b.var(1))?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        })
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at exactly 0 has a one-sided derivative the check sees as 1/2.
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.0));
        let report = check_gradients(&store, 1e-5, &|tape, b| {
            let r = tape.relu(b.var(0))?;
            tape.sum(r)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.4);
    }
}

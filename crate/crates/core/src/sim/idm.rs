//! Intelligent Driver Model car-following law.

use serde::{Deserialize, Serialize};

use super::{SimError, VehicleState};

/// Distribution of the additive acceleration noise applied to human drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform on `[-noise_mag, +noise_mag]`.
    Uniform,
    /// Zero-mean Gaussian with standard deviation `noise_mag`.
    Gaussian,
}

/// Parameters of the IDM human-driver model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Desired speed `v0` (m/s).
    pub desired_speed: f64,
    /// Safe time headway `T` (s).
    pub time_headway: f64,
    /// Maximum acceleration `a` (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration `b` (m/s², positive).
    pub comfort_decel: f64,
    /// Acceleration exponent `δ`.
    pub exponent: f64,
    /// Minimum standstill gap `s0` (m).
    pub min_gap: f64,
    /// Noise magnitude (m/s²): half-width for uniform, std for Gaussian.
    pub noise_mag: f64,
    pub noise: NoiseKind,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 30.0 / 3.6,
            time_headway: 1.0,
            max_accel: 1.0,
            comfort_decel: 1.5,
            exponent: 4.0,
            min_gap: 2.0,
            noise_mag: 0.2,
            noise: NoiseKind::Uniform,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
            ("exponent", self.exponent),
            ("min_gap", self.min_gap),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SimError::InvalidSpec(format!("idm.{name} must be positive, got {value}")));
            }
        }
        if !(self.noise_mag >= 0.0 && self.noise_mag.is_finite()) {
            return Err(SimError::InvalidSpec(format!(
                "idm.noise_mag must be non-negative, got {}",
                self.noise_mag
            )));
        }
        Ok(())
    }

    /// Desired dynamic gap `s*` for the given own speed and approach rate
    /// `v - v_leader`.
    pub fn desired_gap(&self, speed: f64, approach_rate: f64) -> f64 {
        let interaction = speed * self.time_headway
            + speed * approach_rate / (2.0 * (self.max_accel * self.comfort_decel).sqrt());
        self.min_gap + interaction.max(0.0)
    }
}

/// Deterministic IDM acceleration of `ego` following a leader `leader_gap`
/// metres ahead (bumper to bumper) travelling at `leader_speed`.
///
/// An infinite gap yields the free-road acceleration. Noise is not applied
/// here; the stepper adds it.
pub fn idm_accel(
    ego: &VehicleState,
    leader_gap: f64,
    leader_speed: f64,
    params: &IdmParams,
) -> Result<f64, SimError> {
    idm_accel_raw(ego.speed, leader_gap, leader_speed, params)
}

pub(crate) fn idm_accel_raw(
    speed: f64,
    leader_gap: f64,
    leader_speed: f64,
    params: &IdmParams,
) -> Result<f64, SimError> {
    if !(leader_gap > 0.0) {
        return Err(SimError::DegenerateGap(leader_gap));
    }
    let free = (speed / params.desired_speed).powf(params.exponent);
    let interaction = if leader_gap.is_infinite() {
        0.0
    } else {
        let s_star = params.desired_gap(speed, speed - leader_speed);
        (s_star / leader_gap).powi(2)
    };
    Ok(params.max_accel * (1.0 - free - interaction))
}

/// Speed at which a platoon with uniform bumper-to-bumper gap `gap` is in
/// IDM equilibrium (zero acceleration), found by bisection.
pub fn equilibrium_speed(gap: f64, params: &IdmParams) -> Result<f64, SimError> {
    if !(gap > 0.0) {
        return Err(SimError::DegenerateGap(gap));
    }
    let accel = |v: f64| idm_accel_raw(v, gap, v, params);
    if accel(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, params.desired_speed);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if accel(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> IdmParams {
        IdmParams {
            desired_speed: 30.0,
            time_headway: 1.0,
            max_accel: 1.0,
            comfort_decel: 1.5,
            exponent: 4.0,
            min_gap: 2.0,
            noise_mag: 0.0,
            noise: NoiseKind::Uniform,
        }
    }

    #[test]
    fn free_flow_at_desired_speed_is_equilibrium() {
        let p = params();
        let a = idm_accel_raw(p.desired_speed, f64::INFINITY, p.desired_speed, &p).unwrap();
        assert_eq!(a, 0.0);
        let near = idm_accel_raw(p.desired_speed, 1e6, p.desired_speed, &p).unwrap();
        assert!(near < 0.0 && near > -1e-8);
    }

    #[test]
    fn standstill_at_min_gap_is_equilibrium() {
        let p = params();
        assert_eq!(idm_accel_raw(0.0, p.min_gap, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_case() {
        // s* = 2 + 5*1 = 7; a = 1 - (5/30)^4 - (7/12)^2
        let expected = 1.0 - (1.0f64 / 6.0).powi(4) - (7.0f64 / 12.0).powi(2);
        let a = idm_accel_raw(5.0, 12.0, 5.0, &params()).unwrap();
        assert!((a - expected).abs() < 1e-15);
        assert!((a - 0.658950617).abs() < 1e-9);
    }

    #[test]
    fn non_positive_gap_is_rejected() {
        assert!(matches!(
            idm_accel_raw(3.0, 0.0, 3.0, &params()),
            Err(SimError::DegenerateGap(_))
        ));
        assert!(idm_accel_raw(3.0, -1.0, 3.0, &params()).is_err());
    }

    #[test]
    fn equilibrium_speed_zeroes_acceleration() {
        let p = params();
        let v = equilibrium_speed(5.45, &p).unwrap();
        assert!(v > 0.0 && v < p.desired_speed);
        assert!(idm_accel_raw(v, 5.45, v, &p).unwrap().abs() < 1e-12);
        assert_eq!(equilibrium_speed(p.min_gap, &p).unwrap(), 0.0);
    }
}

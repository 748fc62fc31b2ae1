//! CAV-to-CAV dynamic adjacency.
//!
//! Each CAV senses the CAVs within its scan scale `SC` (shortest route
//! distance). The default scheme weights a neighbour by a Gaussian kernel of
//! the distance times the relative speed,
//!
//! ```text
//! M(i, j) = exp(-d(i, j)² / (2σ²)) · (v_j - v_i)     for j ≠ i, d(i, j) ≤ SC
//! M(i, i) = 1
//! ```
//!
//! which is the one-point Gaussian-process posterior mean of the relative
//! velocity field `K(x_i, x_j) K(x_j, x_j)⁻¹ Δv`. Two ablations replace the
//! entry with the signed distance or with `v_T / (v_i |v_j - v_i| + ε)`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{RoadNetwork, SimState, VehicleKind};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("no CAVs present to build an adjacency matrix")]
    NoAgents,
    #[error("invalid adjacency scheme: {0}")]
    InvalidScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub amplitude: f64,
    /// σ, metres.
    pub length_scale: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            amplitude: 1.0,
            length_scale: 4.0,
        }
    }
}

impl KernelSpec {
    /// `A · exp(-d² / (2σ²))`.
    pub fn eval(&self, distance: f64) -> f64 {
        self.amplitude * (-(distance * distance) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Kernel between two positions, using the shortest route distance on
/// closed networks.
pub fn gaussian_kernel(network: &RoadNetwork, xi: f64, xj: f64, spec: &KernelSpec) -> f64 {
    spec.eval(network.distance(xi, xj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdjacencyScheme {
    /// Kernel-weighted relative speed (position and velocity).
    GaussianSpeedField {
        #[serde(default)]
        kernel: KernelSpec,
    },
    /// Signed route distance `x_i - x_j`.
    PositionOnly,
    /// `v_T / (v_i |v_j - v_i| + ε)`.
    VelocityOnly {
        #[serde(default = "velocity_epsilon")]
        epsilon: f64,
        /// v_T, m/s. Set from the scenario when the config is resolved.
        #[serde(default)]
        target_speed: f64,
    },
}

fn velocity_epsilon() -> f64 {
    AdjacencyScheme::VELOCITY_EPSILON
}

impl Default for AdjacencyScheme {
    fn default() -> Self {
        AdjacencyScheme::GaussianSpeedField {
            kernel: KernelSpec::default(),
        }
    }
}

impl AdjacencyScheme {
    /// Default ε for the velocity-only scheme, m²/s².
    pub const VELOCITY_EPSILON: f64 = 0.1;

    /// Scheme selected by its sweep label, keeping kernel and ε from `self`
    /// when it already is of that kind.
    pub fn from_label(&self, label: &str, target_speed: f64) -> Result<Self, GraphError> {
        Ok(match (label, *self) {
            ("both", s @ AdjacencyScheme::GaussianSpeedField { .. }) => s,
            ("both", _) => AdjacencyScheme::default(),
            ("position", _) => AdjacencyScheme::PositionOnly,
            ("velocity", AdjacencyScheme::VelocityOnly { epsilon, .. }) => {
                AdjacencyScheme::VelocityOnly { epsilon, target_speed }
            }
            ("velocity", _) => AdjacencyScheme::VelocityOnly {
                epsilon: Self::VELOCITY_EPSILON,
                target_speed,
            },
            (other, _) => {
                return Err(GraphError::InvalidScheme(format!(
                    "unknown scheme `{other}`, expected position, velocity or both"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        match *self {
            AdjacencyScheme::GaussianSpeedField { kernel } => {
                if !(kernel.amplitude > 0.0 && kernel.length_scale > 0.0) {
                    return Err(GraphError::InvalidScheme(
                        "kernel amplitude and length scale must be positive".into(),
                    ));
                }
            }
            AdjacencyScheme::PositionOnly => {}
            AdjacencyScheme::VelocityOnly { epsilon, target_speed } => {
                if !(epsilon > 0.0) {
                    return Err(GraphError::InvalidScheme("velocity-only epsilon must be positive".into()));
                }
                if !(target_speed > 0.0) {
                    return Err(GraphError::InvalidScheme("velocity-only target speed must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Short label used in sweep tables.
    pub fn label(&self) -> &'static str {
        match self {
            AdjacencyScheme::GaussianSpeedField { .. } => "both",
            AdjacencyScheme::PositionOnly => "position",
            AdjacencyScheme::VelocityOnly { .. } => "velocity",
        }
    }
}

/// Adjacency among the CAVs of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub weights: Tensor,
    pub scan_scale: f64,
    pub agent_ids: Vec<u32>,
    /// Number of agents within scan scale, self included.
    pub degree: Vec<f64>,
    /// `mask[i][j]` iff `j` is within scan scale of `i` (diagonal included).
    pub mask: Vec<Vec<bool>>,
}

impl AdjacencyMatrix {
    pub fn len(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }

    /// Indices of agent `i` and its neighbours within scan scale.
    pub fn neighbor_set(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.mask[i][j]).collect()
    }

    /// `D⁻¹ M`.
    pub fn degree_normalize(&self) -> Tensor {
        degree_normalize(self)
    }

    /// Row-major CSV with the agent ids as header.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.agent_ids.iter().map(|id| id.to_string()))?;
        for r in 0..self.len() {
            w.write_record(self.weights.row(r).iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the adjacency among the CAVs of `state`, ordered as
/// [`SimState::cav_ids`].
pub fn build_adjacency(
    state: &SimState,
    scheme: &AdjacencyScheme,
    scan_scale: f64,
) -> Result<AdjacencyMatrix, GraphError> {
    scheme.validate()?;
    let network = state.network();
    let agents: Vec<(u32, f64, f64)> = state
        .vehicles
        .iter()
        .filter(|v| v.kind == VehicleKind::Cav)
        .map(|v| (v.id, state.coordinate(v), v.speed))
        .collect();
    if agents.is_empty() {
        return Err(GraphError::NoAgents);
    }
    let n = agents.len();
    let mut weights = Tensor::zeros(n, n);
    let mut mask = vec![vec![false; n]; n];
    let mut degree = vec![0.0; n];
    for (i, &(_, xi, vi)) in agents.iter().enumerate() {
        for (j, &(_, xj, vj)) in agents.iter().enumerate() {
            if i == j {
                mask[i][j] = true;
                degree[i] += 1.0;
                weights.set(i, j, 1.0);
                continue;
            }
            let signed = network.signed_distance(xi, xj);
            if signed.abs() > scan_scale {
                continue;
            }
            mask[i][j] = true;
            degree[i] += 1.0;
            let w = match *scheme {
                AdjacencyScheme::GaussianSpeedField { kernel } => {
                    kernel.eval(signed) / kernel.amplitude * (vj - vi)
                }
                AdjacencyScheme::PositionOnly => signed,
                AdjacencyScheme::VelocityOnly { epsilon, target_speed } => {
                    target_speed / (vi * (vj - vi).abs() + epsilon)
                }
            };
            weights.set(i, j, w);
        }
    }
    Ok(AdjacencyMatrix {
        weights,
        scan_scale,
        agent_ids: agents.iter().map(|a| a.0).collect(),
        degree,
        mask,
    })
}

/// Row-scale the weights by the inverse degree.
pub fn degree_normalize(adj: &AdjacencyMatrix) -> Tensor {
    let n = adj.len();
    let mut out = adj.weights.clone();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, out.get(i, j) / adj.degree[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::sim::{build_network, SimParams};

    fn two_cavs(gap: f64, vi: f64, vj: f64) -> SimState {
        let mut state = build_network(&RoadNetwork::ring(200.0), 0, 2, 0, &SimParams::default()).unwrap();
        state.vehicles[0].route_pos = 10.0;
        state.vehicles[0].speed = vi;
        state.vehicles[1].route_pos = 10.0 + gap;
        state.vehicles[1].speed = vj;
        state
    }

    #[test]
    fn kernel_values() {
        let spec = KernelSpec::default();
        assert_eq!(spec.eval(0.0), 1.0);
        assert!((spec.eval(4.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((spec.eval(4.0) - 0.6065306597).abs() < 1e-9);
        let ring = RoadNetwork::ring(100.0);
        let k = gaussian_kernel(&ring, 98.0, 2.0, &spec);
        assert!((k - spec.eval(4.0)).abs() < 1e-15);
        let amp = KernelSpec {
            amplitude: 2.5,
            length_scale: 4.0,
        };
        assert_eq!(amp.eval(0.0), 2.5);
    }

    #[test]
    fn uniform_speed_gives_zero_off_diagonal() {
        let state = two_cavs(4.0, 6.0, 6.0);
        let adj = build_adjacency(&state, &AdjacencyScheme::default(), 30.0).unwrap();
        assert_eq!(adj.weights, Tensor::identity(2));
    }

    #[test]
    fn hand_evaluated_entry() {
        let state = two_cavs(4.0, 5.0, 7.0);
        let adj = build_adjacency(&state, &AdjacencyScheme::default(), 30.0).unwrap();
        let expected = (-0.5f64).exp() * 2.0;
        assert!((adj.weights.get(0, 1) - expected).abs() < 1e-15);
        assert!((adj.weights.get(0, 1) - 1.2130613).abs() < 1e-7);
        assert!((adj.weights.get(1, 0) + expected).abs() < 1e-15);
        assert_eq!(adj.degree, vec![2.0, 2.0]);
    }

    #[test]
    fn beyond_scan_scale_is_masked() {
        let state = two_cavs(50.0, 5.0, 7.0);
        let adj = build_adjacency(&state, &AdjacencyScheme::default(), 30.0).unwrap();
        assert_eq!(adj.weights.get(0, 1), 0.0);
        assert_eq!(adj.weights.get(1, 0), 0.0);
        assert_eq!(adj.degree, vec![1.0, 1.0]);
        assert_eq!(adj.neighbor_set(0), vec![0]);
    }

    #[test]
    fn ablation_schemes() {
        let state = two_cavs(4.0, 5.0, 7.0);
        let pos = build_adjacency(&state, &AdjacencyScheme::PositionOnly, 30.0).unwrap();
        assert_eq!(pos.weights.get(0, 1), -4.0);
        assert_eq!(pos.weights.get(1, 0), 4.0);
        let vel = AdjacencyScheme::VelocityOnly {
            epsilon: 0.1,
            target_speed: 8.0,
        };
        let vel = build_adjacency(&state, &vel, 30.0).unwrap();
        assert!((vel.weights.get(0, 1) - 8.0 / (5.0 * 2.0 + 0.1)).abs() < 1e-15);
        assert!((vel.weights.get(1, 0) - 8.0 / (7.0 * 2.0 + 0.1)).abs() < 1e-15);
        assert!(AdjacencyScheme::VelocityOnly {
            epsilon: 0.0,
            target_speed: 8.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_cav_is_unit_matrix_under_every_scheme() {
        let state = build_network(&RoadNetwork::ring(100.0), 3, 1, 0, &SimParams::default()).unwrap();
        for scheme in [
            AdjacencyScheme::default(),
            AdjacencyScheme::PositionOnly,
            AdjacencyScheme::VelocityOnly {
                epsilon: 0.01,
                target_speed: 8.0,
            },
        ] {
            let adj = build_adjacency(&state, &scheme, 30.0).unwrap();
            assert_eq!(adj.weights, Tensor::from_rows(&[[1.0]]));
        }
    }

    #[test]
    fn no_agents_error() {
        let state = build_network(&RoadNetwork::ring(100.0), 3, 0, 0, &SimParams::default()).unwrap();
        assert_eq!(
            build_adjacency(&state, &AdjacencyScheme::default(), 30.0).unwrap_err(),
            GraphError::NoAgents
        );
    }

    #[test]
    fn degree_normalization() {
        let state = build_network(&RoadNetwork::ring(100.0), 0, 3, 0, &SimParams::default()).unwrap();
        let adj = build_adjacency(&state, &AdjacencyScheme::PositionOnly, 40.0).unwrap();
        assert_eq!(adj.degree, vec![3.0, 3.0, 3.0]);
        let norm = degree_normalize(&adj);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(norm.get(i, j), adj.weights.get(i, j) / 3.0);
            }
        }
        let isolated = build_adjacency(&state, &AdjacencyScheme::default(), 1.0).unwrap();
        assert_eq!(degree_normalize(&isolated), Tensor::identity(3));
        // D⁻¹ applied to the binary indicator has unit row sums.
        for i in 0..3 {
            let s: f64 = adj.mask[i].iter().map(|&m| if m { 1.0 } else { 0.0 }).sum::<f64>() / adj.degree[i];
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn csv_dump() {
        let state = two_cavs(4.0, 5.0, 7.0);
        let adj = build_adjacency(&state, &AdjacencyScheme::PositionOnly, 30.0).unwrap();
        let mut buf = Vec::new();
        adj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,1\n1,-4\n4,1\n");
    }

    proptest! {
        #[test]
        fn locality_monotone_in_distance(d1 in 0.0f64..30.0, d2 in 0.0f64..30.0, dv in -5.0f64..5.0) {
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = build_adjacency(&two_cavs(near.max(1e-9), 5.0, 5.0 + dv), &AdjacencyScheme::default(), 30.0).unwrap();
            let b = build_adjacency(&two_cavs(far.max(1e-9), 5.0, 5.0 + dv), &AdjacencyScheme::default(), 30.0).unwrap();
            prop_assert!(a.weights.get(0, 1).abs() >= b.weights.get(0, 1).abs());
        }
    }
}

//! Road topologies: single-lane ring, figure-eight crossing, on-ramp merge.

use serde::{Deserialize, Serialize};

use super::SimError;

pub const MAIN_ROUTE: u32 = 0;
pub const RAMP_ROUTE: u32 = 1;

/// Topology descriptor. Lengths are in metres, inflows in vehicles/hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoadNetwork {
    Ring {
        #[serde(default = "defaults::ring_length")]
        length: f64,
    },
    /// Two equal circular loops sharing one crossing. Both loops use the same
    /// arc coordinate, so `conflict_start` locates the crossing on either loop.
    FigureEight {
        #[serde(default = "defaults::loop_length")]
        loop_length: f64,
        #[serde(default = "defaults::conflict_start")]
        conflict_start: f64,
        #[serde(default = "defaults::conflict_length")]
        conflict_length: f64,
    },
    /// Open highway with an on-ramp joining at `merge_point`.
    Merge {
        #[serde(default = "defaults::highway_length")]
        highway_length: f64,
        #[serde(default = "defaults::ramp_length")]
        ramp_length: f64,
        #[serde(default = "defaults::merge_point")]
        merge_point: f64,
        #[serde(default = "defaults::inflow_main")]
        inflow_main: f64,
        #[serde(default = "defaults::inflow_ramp")]
        inflow_ramp: f64,
    },
}

mod defaults {
    pub fn ring_length() -> f64 {
        230.0
    }
    pub fn loop_length() -> f64 {
        143.0
    }
    pub fn conflict_start() -> f64 {
        66.5
    }
    pub fn conflict_length() -> f64 {
        10.0
    }
    pub fn highway_length() -> f64 {
        500.0
    }
    pub fn ramp_length() -> f64 {
        100.0
    }
    pub fn merge_point() -> f64 {
        400.0
    }
    pub fn inflow_main() -> f64 {
        1000.0
    }
    pub fn inflow_ramp() -> f64 {
        200.0
    }
}

impl RoadNetwork {
    pub fn ring(length: f64) -> Self {
        RoadNetwork::Ring { length }
    }

    pub fn figure_eight() -> Self {
        RoadNetwork::FigureEight {
            loop_length: defaults::loop_length(),
            conflict_start: defaults::conflict_start(),
            conflict_length: defaults::conflict_length(),
        }
    }

    pub fn merge() -> Self {
        RoadNetwork::Merge {
            highway_length: defaults::highway_length(),
            ramp_length: defaults::ramp_length(),
            merge_point: defaults::merge_point(),
            inflow_main: defaults::inflow_main(),
            inflow_ramp: defaults::inflow_ramp(),
        }
    }

    pub fn is_closed(&self) -> bool {
        !matches!(self, RoadNetwork::Merge { .. })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        let positive = |name: &str, v: f64| -> Result<(), SimError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimError::InvalidSpec(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            RoadNetwork::Ring { length } => positive("ring length", length),
            RoadNetwork::FigureEight {
                loop_length,
                conflict_start,
                conflict_length,
            } => {
                positive("loop_length", loop_length)?;
                positive("conflict_length", conflict_length)?;
                if !(conflict_start >= 0.0 && conflict_start + conflict_length <= loop_length) {
                    return bad(format!(
                        "conflict zone [{conflict_start}, {}] lies outside the {loop_length} m loop",
                        conflict_start + conflict_length
                    ));
                }
                Ok(())
            }
            RoadNetwork::Merge {
                highway_length,
                ramp_length,
                merge_point,
                inflow_main,
                inflow_ramp,
            } => {
                positive("highway_length", highway_length)?;
                positive("ramp_length", ramp_length)?;
                positive("merge_point", merge_point)?;
                if merge_point >= highway_length {
                    return bad(format!("merge_point {merge_point} must be < highway_length {highway_length}"));
                }
                if ramp_length > merge_point {
                    return bad(format!("ramp_length {ramp_length} exceeds merge_point {merge_point}"));
                }
                if !(inflow_main >= 0.0 && inflow_ramp >= 0.0) {
                    return bad("merge inflow rates must be non-negative".into());
                }
                Ok(())
            }
        }
    }

    /// Length of the route a vehicle on `route_id` follows.
    pub fn route_length(&self, route_id: u32) -> f64 {
        match *self {
            RoadNetwork::Ring { length } => length,
            RoadNetwork::FigureEight { loop_length, .. } => loop_length,
            RoadNetwork::Merge {
                highway_length,
                ramp_length,
                merge_point,
                ..
            } => {
                if route_id == RAMP_ROUTE {
                    ramp_length + highway_length - merge_point
                } else {
                    highway_length
                }
            }
        }
    }

    /// Length of the shared coordinate used for distances between vehicles:
    /// the loop circumference on closed networks, the highway on the merge.
    pub fn coordinate_length(&self) -> f64 {
        match *self {
            RoadNetwork::Ring { length } => length,
            RoadNetwork::FigureEight { loop_length, .. } => loop_length,
            RoadNetwork::Merge { highway_length, .. } => highway_length,
        }
    }

    /// Position of a vehicle in the shared coordinate. Ramp positions are
    /// projected onto the highway so that the ramp end meets `merge_point`.
    pub fn coordinate(&self, route_id: u32, route_pos: f64) -> f64 {
        match *self {
            RoadNetwork::Merge {
                ramp_length,
                merge_point,
                ..
            } if route_id == RAMP_ROUTE => route_pos + merge_point - ramp_length,
            _ => route_pos,
        }
    }

    /// Signed distance `x_a - x_b` in the shared coordinate. On closed
    /// networks this is the shortest cyclic displacement, in `[-L/2, L/2]`.
    /// Exactly antisymmetric in its arguments.
    pub fn signed_distance(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        if self.is_closed() {
            let len = self.coordinate_length();
            let w = d.abs() % len;
            let m = if w > 0.5 * len { w - len } else { w };
            if d < 0.0 {
                -m
            } else {
                m
            }
        } else {
            d
        }
    }

    pub fn distance(&self, a: f64, b: f64) -> f64 {
        self.signed_distance(a, b).abs()
    }

    /// Whether two routes share the lane at the given coordinate.
    pub(crate) fn shares_lane(&self, route_a: u32, route_b: u32, coord_b: f64) -> bool {
        match *self {
            RoadNetwork::Ring { .. } => true,
            RoadNetwork::FigureEight { .. } => route_a == route_b,
            RoadNetwork::Merge { merge_point, .. } => route_a == route_b || coord_b >= merge_point,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_distance_is_shortest_way_round() {
        let ring = RoadNetwork::ring(100.0);
        assert_eq!(ring.signed_distance(95.0, 5.0), -10.0);
        assert_eq!(ring.signed_distance(5.0, 95.0), 10.0);
        assert_eq!(ring.distance(0.0, 50.0), 50.0);
        assert_eq!(ring.distance(30.0, 30.0), 0.0);
    }

    #[test]
    fn ramp_projects_onto_highway() {
        let merge = RoadNetwork::merge();
        assert_eq!(merge.coordinate(RAMP_ROUTE, 100.0), 400.0);
        assert_eq!(merge.coordinate(MAIN_ROUTE, 100.0), 100.0);
        assert_eq!(merge.route_length(RAMP_ROUTE), 200.0);
        assert_eq!(merge.signed_distance(10.0, 400.0), -390.0);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(RoadNetwork::ring(0.0).validate().is_err());
        assert!(RoadNetwork::ring(-3.0).validate().is_err());
        let bad_merge = RoadNetwork::Merge {
            highway_length: 100.0,
            ramp_length: 50.0,
            merge_point: 150.0,
            inflow_main: 10.0,
            inflow_ramp: 10.0,
        };
        assert!(bad_merge.validate().is_err());
        let bad_eight = RoadNetwork::FigureEight {
            loop_length: 50.0,
            conflict_start: 45.0,
            conflict_length: 10.0,
        };
        assert!(bad_eight.validate().is_err());
        assert!(RoadNetwork::figure_eight().validate().is_ok());
        assert!(RoadNetwork::merge().validate().is_ok());
    }
}

//! CSV export and re-import of per-step vehicle kinematics.
//!
//! The trajectory file has the header `step,vehicle_id,kind,route_pos,speed,accel`
//! with one row per vehicle per step. Floats are written in their shortest
//! round-trip form, so reading a file back reproduces the logged values bit
//! for bit. Route assignments, which the trajectory file does not carry, go
//! to a companion `vehicle_id,route_id` file when the network has more than
//! one route.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::{StepInfo, VehicleKind, VehicleRecord, MAIN_ROUTE};

pub const TRAJECTORY_HEADER: [&str; 6] = ["step", "vehicle_id", "kind", "route_pos", "speed", "accel"];
pub const ROUTES_HEADER: [&str; 2] = ["vehicle_id", "route_id"];

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("row {row}: bad value {value:?} in column {column}")]
    Field {
        row: usize,
        column: &'static str,
        value: String,
    },
}

/// One logged step: its index and the vehicles present after it.
pub type LoggedStep = (u64, Vec<VehicleRecord>);

pub fn write_trajectory<W: Write>(out: W, steps: &[StepInfo]) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for info in steps {
        for r in &info.records {
            w.write_record([
                info.time_step.to_string(),
                r.id.to_string(),
                r.kind.as_str().to_string(),
                r.route_pos.to_string(),
                r.speed.to_string(),
                r.accel.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_routes<W: Write>(out: W, steps: &[StepInfo]) -> Result<(), TrajectoryError> {
    let mut routes = BTreeMap::new();
    for info in steps {
        for r in &info.records {
            routes.insert(r.id, r.route_id);
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUTES_HEADER)?;
    for (id, route) in routes {
        w.write_record([id.to_string(), route.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_routes<R: Read>(input: R) -> Result<BTreeMap<u32, u32>, TrajectoryError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(rdr.headers()?, &ROUTES_HEADER)?;
    let mut routes = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = parse(&rec, 0, row, "vehicle_id")?;
        let route = parse(&rec, 1, row, "route_id")?;
        routes.insert(id, route);
    }
    Ok(routes)
}

/// Read a trajectory file back into per-step records. Vehicles missing from
/// `routes` are assigned the main route.
pub fn read_trajectory<R: Read>(
    input: R,
    routes: Option<&BTreeMap<u32, u32>>,
) -> Result<Vec<LoggedStep>, TrajectoryError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(rdr.headers()?, &TRAJECTORY_HEADER)?;
    let mut steps: Vec<LoggedStep> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let step: u64 = parse(&rec, 0, row, "step")?;
        let id: u32 = parse(&rec, 1, row, "vehicle_id")?;
        let kind = match rec.get(2) {
            Some("human") => VehicleKind::Human,
            Some("cav") => VehicleKind::Cav,
            other => {
                return Err(TrajectoryError::Field {
                    row,
                    column: "kind",
                    value: other.unwrap_or_default().to_string(),
                })
            }
        };
        let record = VehicleRecord {
            id,
            kind,
            route_id: routes.and_then(|m| m.get(&id).copied()).unwrap_or(MAIN_ROUTE),
            route_pos: parse(&rec, 3, row, "route_pos")?,
            speed: parse(&rec, 4, row, "speed")?,
            accel: parse(&rec, 5, row, "accel")?,
        };
        match steps.last_mut() {
            Some((s, records)) if *s == step => records.push(record),
            _ => steps.push((step, vec![record])),
        }
    }
    Ok(steps)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), TrajectoryError> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(TrajectoryError::Header(found.iter().map(str::to_string).collect()));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    row: usize,
    column: &'static str,
) -> Result<T, TrajectoryError> {
    let raw = rec.get(idx).unwrap_or_default();
    raw.parse().map_err(|_| TrajectoryError::Field {
        row,
        column,
        value: raw.to_string(),
    })
}

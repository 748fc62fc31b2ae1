//! One-variable sweeps: train and evaluate a grid of values × seeds.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError};
use crate::graph::AdjacencyScheme;
use crate::trainer::{train, TrainError, TrainSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Fraction of vehicles that are CAVs.
    PenetrationRate,
    /// km/h.
    TargetSpeed,
    /// Metres.
    ScanScale,
    /// `position`, `velocity` or `both`.
    AdjacencyScheme,
    AttentionHeads,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::PenetrationRate => "penetration_rate",
            SweepVariable::TargetSpeed => "target_speed",
            SweepVariable::ScanScale => "scan_scale",
            SweepVariable::AdjacencyScheme => "adjacency_scheme",
            SweepVariable::AttentionHeads => "attention_heads",
        }
    }
}

impl FromStr for SweepVariable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "penetration_rate" => SweepVariable::PenetrationRate,
            "target_speed" => SweepVariable::TargetSpeed,
            "scan_scale" => SweepVariable::ScanScale,
            "adjacency_scheme" => SweepVariable::AdjacencyScheme,
            "attention_heads" => SweepVariable::AttentionHeads,
            _ => {
                return Err(format!(
                    "unknown sweep variable `{s}`, expected penetration_rate, target_speed, scan_scale, adjacency_scheme or attention_heads"
                ))
            }
        })
    }
}

/// Speed the target-speed percentages are measured against, km/h.
pub const TARGET_SPEED_BASELINE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<String>,
    /// Training episodes per cell.
    pub episodes: usize,
    /// Evaluation episodes per cell.
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.values.is_empty() {
            return Err("sweep needs at least one value".into());
        }
        if self.seeds.is_empty() {
            return Err("sweep needs at least one seed".into());
        }
        if self.eval_episodes == 0 {
            return Err("sweep needs at least one evaluation episode".into());
        }
        Ok(())
    }
}

fn number(variable: SweepVariable, value: &str) -> Result<f64, String> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("{}: `{value}` is not a number", variable.name()))
}

/// `base` with one variable set to `value`.
pub fn apply_sweep_value(base: &TrainSetup, variable: SweepVariable, value: &str) -> Result<TrainSetup, String> {
    let mut s = base.clone();
    match variable {
        SweepVariable::PenetrationRate => {
            let rate = number(variable, value)?;
            if !(0.0..=1.0).contains(&rate) {
                return Err(format!("penetration_rate {rate} outside [0, 1]"));
            }
            let total = s.scenario.humans + s.scenario.cavs;
            s.scenario.cavs = (rate * total as f64).round() as usize;
            s.scenario.humans = total - s.scenario.cavs;
            s.scenario.sim.penetration_rate = rate;
        }
        SweepVariable::TargetSpeed => {
            let v = number(variable, value)? / 3.6;
            if v <= 0.0 {
                return Err("target_speed must be positive".into());
            }
            s.scenario.target_speed = v;
            s.reward = s.reward.with_target_speed(v);
            if let AdjacencyScheme::VelocityOnly { target_speed, .. } = &mut s.graph.scheme {
                *target_speed = v;
            }
        }
        SweepVariable::ScanScale => s.graph.scan_scale = number(variable, value)?,
        SweepVariable::AdjacencyScheme => {
            s.graph.scheme = s
                .graph
                .scheme
                .from_label(value.trim(), s.scenario.target_speed)
                .map_err(|e| e.to_string())?
        }
        SweepVariable::AttentionHeads => {
            s.arch.heads = value
                .trim()
                .parse()
                .map_err(|_| format!("attention_heads: `{value}` is not a count"))?
        }
    }
    s.validate().map_err(|e| e.to_string())?;
    Ok(s)
}

/// One cell of the sweep table. Failed cells carry the error and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variable: SweepVariable,
    pub value: String,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: Option<f64>,
    pub mean_velocity: Option<f64>,
    pub mean_abs_accel: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(base: &TrainSetup, spec: &SweepSpec, value: &str, seed: u64) -> SweepRow {
    let result = (|| -> Result<(f64, f64, f64), String> {
        let mut setup = apply_sweep_value(base, spec.variable, value)?;
        setup.ppo.episodes = spec.episodes;
        let outcome = train(&setup, seed, &mut |_, _| Ok::<(), TrainError>(())).map_err(|e| e.to_string())?;
        let report = evaluate(
            Some(&outcome.policy),
            &setup.scenario,
            &setup.graph,
            setup.reward,
            spec.eval_episodes,
            &[seed],
        )
        .map_err(|e: EvalError| e.to_string())?;
        Ok((report.ret, report.mean_velocity, report.mean_abs_accel))
    })();
    let (metrics, error) = match result {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e)),
    };
    SweepRow {
        variable: spec.variable,
        value: value.trim().to_string(),
        seed,
        ret: metrics.map(|m| m.0),
        mean_velocity: metrics.map(|m| m.1),
        mean_abs_accel: metrics.map(|m| m.2),
        error,
    }
}

/// Train and evaluate every value × seed cell, spread over `threads`
/// workers. Rows come back in value-major order regardless of scheduling.
/// Target-speed sweeps gain a 20 km/h cell when it is missing so the
/// percentage table has its baseline.
pub fn run_sweep(base: &TrainSetup, spec: &SweepSpec, threads: usize) -> Result<Vec<SweepRow>, String> {
    spec.validate()?;
    let mut values = spec.values.clone();
    if spec.variable == SweepVariable::TargetSpeed
        && !values
            .iter()
            .any(|v| v.trim().parse::<f64>().ok() == Some(TARGET_SPEED_BASELINE))
    {
        values.insert(0, TARGET_SPEED_BASELINE.to_string());
    }
    let cells: Vec<(&str, u64)> = values
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v.as_str(), s)))
        .collect();
    let threads = threads.clamp(1, cells.len());
    let mut rows: Vec<Option<SweepRow>> = vec![None; cells.len()];
    std::thread::scope(|scope| {
        let chunks: Vec<_> = rows
            .chunks_mut(cells.len().div_ceil(threads))
            .zip(cells.chunks(cells.len().div_ceil(threads)))
            .map(|(out, work)| {
                scope.spawn(move || {
                    for (slot, (value, seed)) in out.iter_mut().zip(work) {
                        *slot = Some(run_cell(base, spec, value, *seed));
                    }
                })
            })
            .collect();
        for c in chunks {
            c.join().expect("sweep worker panicked");
        }
    });
    Ok(rows.into_iter().map(|r| r.expect("every cell ran")).collect())
}

pub const SWEEP_HEADER: [&str; 6] = ["variable", "value", "seed", "return", "mean_velocity", "mean_abs_accel"];

fn field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Failed cells leave the metric columns empty.
pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.variable.name().to_string(),
            r.value.clone(),
            r.seed.to_string(),
            field(r.ret),
            field(r.mean_velocity),
            field(r.mean_abs_accel),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedChange {
    /// km/h.
    pub target_speed: f64,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub baseline_return: f64,
    /// `100 (R - R_20) / |R_20|`.
    pub percent_change: f64,
}

/// Percentage return change of every target-speed cell relative to the
/// 20 km/h cell of the same seed. Cells without a baseline are skipped.
pub fn target_speed_change(rows: &[SweepRow]) -> Vec<SpeedChange> {
    let parse = |r: &SweepRow| r.value.parse::<f64>().ok();
    rows.iter()
        .filter(|r| r.variable == SweepVariable::TargetSpeed)
        .filter_map(|r| {
            let base = rows
                .iter()
                .find(|b| b.variable == SweepVariable::TargetSpeed && b.seed == r.seed && parse(b) == Some(TARGET_SPEED_BASELINE))?
                .ret?;
            let ret = r.ret?;
            Some(SpeedChange {
                target_speed: parse(r)?,
                seed: r.seed,
                ret,
                baseline_return: base,
                percent_change: 100.0 * (ret - base) / base.abs(),
            })
        })
        .collect()
}

pub const TARGET_SPEED_CHANGE_HEADER: [&str; 5] = ["target_speed", "seed", "return", "baseline_return", "percent_change"];

pub fn write_target_speed_change<W: Write>(out: W, changes: &[SpeedChange]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TARGET_SPEED_CHANGE_HEADER)?;
    for c in changes {
        w.write_record([
            c.target_speed.to_string(),
            c.seed.to_string(),
            c.ret.to_string(),
            c.baseline_return.to_string(),
            c.percent_change.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::RewardSpec;

    fn row(value: &str, seed: u64, ret: Option<f64>) -> SweepRow {
        SweepRow {
            variable: SweepVariable::TargetSpeed,
            value: value.into(),
            seed,
            ret,
            mean_velocity: ret,
            mean_abs_accel: ret,
            error: None,
        }
    }

    #[test]
    fn percent_change_against_baseline() {
        let rows = [row("20", 0, Some(-200.0)), row("30", 0, Some(-100.0)), row("30", 1, Some(5.0))];
        let c = target_speed_change(&rows);
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].percent_change, 50.0);
        assert_eq!(c[0].percent_change, 0.0);
    }

    #[test]
    fn failed_cells_leave_blank_metrics() {
        let mut buf = Vec::new();
        write_sweep(&mut buf, &[row("20", 3, None)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "variable,value,seed,return,mean_velocity,mean_abs_accel\ntarget_speed,20,3,,,\n"
        );
    }

    #[test]
    fn variable_names_round_trip() {
        for v in [
            SweepVariable::PenetrationRate,
            SweepVariable::TargetSpeed,
            SweepVariable::ScanScale,
            SweepVariable::AdjacencyScheme,
            SweepVariable::AttentionHeads,
        ] {
            assert_eq!(v.name().parse::<SweepVariable>().unwrap(), v);
        }
        assert!("speed".parse::<SweepVariable>().is_err());
    }

    #[test]
    fn applying_values() {
        let base = TrainSetup::default();
        let s = apply_sweep_value(&base, SweepVariable::PenetrationRate, "0.5").unwrap();
        assert_eq!((s.scenario.humans, s.scenario.cavs), (11, 11));
        let s = apply_sweep_value(&base, SweepVariable::TargetSpeed, "36").unwrap();
        assert!((s.scenario.target_speed - 10.0).abs() < 1e-12);
        assert_eq!(s.reward.target_speed(), s.scenario.target_speed);
        let s = apply_sweep_value(&base, SweepVariable::AdjacencyScheme, "velocity").unwrap();
        assert_eq!(s.graph.scheme.label(), "velocity");
        let s = apply_sweep_value(&base, SweepVariable::AttentionHeads, "0").unwrap();
        assert_eq!(s.arch.heads, 0);
        assert!(apply_sweep_value(&base, SweepVariable::AttentionHeads, "3").is_err());
        assert!(apply_sweep_value(&base, SweepVariable::ScanScale, "far").is_err());
        assert!(matches!(base.reward, RewardSpec::RingEight { .. }));
    }
}

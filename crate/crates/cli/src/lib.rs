//! Command-line driver. [`dispatch`] parses arguments, runs one subcommand
//! and maps the outcome to an exit code: 0 success, 1 runtime failure,
//! 2 usage error. Failures print one line `error: <kind>: <message>` to
//! stderr.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use cavg::check::run_all;
use cavg::config::RunConfig;
use cavg::eval::{
    decentralization_check, evaluate, run_sweep, target_speed_change, write_spacetime, write_speed_series, write_sweep,
    write_target_speed_change, EvalReport, SweepSpec, SweepVariable,
};
use cavg::nn::{load_checkpoint, save_checkpoint, Policy};
use cavg::seeding::{derive_rng, derive_seed, EVAL_STREAM};
use cavg::sim::trajectory::{write_routes, write_trajectory};
use cavg::trainer::{train, write_learning_curve, ActionMode, EpisodeRunner, TrainError};

#[derive(Debug, Parser)]
#[command(name = "cavg", version, about = "Mixed-autonomy traffic laboratory")]
struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write the adjacency matrix of every step of the first evaluation
    /// episode to `adjacency/`.
    #[arg(long, global = true)]
    dump_adjacency: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one policy per seed, then evaluate it.
    Train { config: PathBuf },
    /// Evaluate a checkpoint with the mean policy.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate across values of one variable.
    Sweep {
        config: PathBuf,
        /// penetration_rate, target_speed (km/h), scan_scale, adjacency_scheme or attention_heads.
        #[arg(long)]
        variable: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Evaluate the scenario with every CAV replaced by an IDM driver.
    Baseline { config: PathBuf },
    /// Run the invariant and gradient self-checks.
    Check,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    fn runtime(kind: &'static str, message: impl ToString) -> Self {
        Failure {
            code: 1,
            kind,
            message: message.to_string(),
        }
    }
}

fn io<E: ToString>(e: E) -> Failure {
    Failure::runtime("io", e)
}

/// Run the command line `argv` (program name first). Returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let body = text.split("\n\nUsage:").next().unwrap_or_default();
            let line = body.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: usage: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, f.message.replace('\n', " "));
            f.code
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Check => check(),
        Command::Train { config } => {
            let (cfg, out) = prepare(&cli, config)?;
            train_cmd(&cfg, &out, cli.dump_adjacency)
        }
        Command::Eval { config, checkpoint } => {
            let (cfg, out) = prepare(&cli, config)?;
            let policy = load_checkpoint(checkpoint, Some(&cfg.nn)).map_err(|e| Failure::runtime("checkpoint", e))?;
            eval_cmd(&cfg, &out, Some(&policy), cli.dump_adjacency, "eval")
        }
        Command::Baseline { config } => {
            let (mut cfg, out) = prepare(&cli, config)?;
            cfg.scenario = cfg.scenario.all_human();
            write_config(&cfg, &out)?;
            eval_cmd(&cfg, &out, None, cli.dump_adjacency, "baseline")
        }
        Command::Sweep {
            config,
            variable,
            values,
        } => {
            let variable: SweepVariable = variable.parse().map_err(Failure::usage)?;
            let (cfg, out) = prepare(&cli, config)?;
            sweep_cmd(&cfg, &out, variable, values)
        }
    }
}

/// Load the config, apply global overrides, create the output directory and
/// write the effective config into it.
fn prepare(cli: &Cli, path: &Path) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::runtime("config", e))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io)?;
    write_config(&cfg, &out)?;
    Ok((cfg, out))
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    fs::write(out.join("config.json"), cfg.to_json() + "\n").map_err(io)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    File::create(path).map(BufWriter::new).map_err(io)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(io)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text + "\n").map_err(io)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    config_hash: String,
    seeds: &'a [u64],
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<&'a EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_returns: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_cells: Option<usize>,
}

fn check() -> Result<(), Failure> {
    let outcomes = run_all();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "pass" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime("check", format!("failed: {}", failed.join(", "))))
    }
}

fn train_cmd(cfg: &RunConfig, out: &Path, dump_adjacency: bool) -> Result<(), Failure> {
    let setup = cfg.train_setup();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io)?;
    let mut curve = Vec::new();
    let mut policies = Vec::new();
    let mut final_returns = Vec::new();
    for &seed in &cfg.seeds {
        let every = cfg.ppo.checkpoint_every;
        let dir = ckpt_dir.clone();
        let outcome = train(&setup, seed, &mut |rec, policy| {
            if every > 0 && (rec.episode + 1) % every == 0 {
                let path = dir.join(format!("seed{seed}_episode{}.json", rec.episode + 1));
                save_checkpoint(&path, policy).map_err(|e| TrainError::Observer(e.to_string()))?;
            }
            Ok(())
        })
        .map_err(|e| Failure::runtime("train", e))?;
        save_checkpoint(&ckpt_dir.join(format!("seed{seed}_final.json")), &outcome.policy)
            .map_err(|e| Failure::runtime("checkpoint", e))?;
        let tail: Vec<f64> = outcome.curve.iter().rev().take(10).map(|r| r.ret).collect();
        final_returns.push(tail.iter().sum::<f64>() / tail.len().max(1) as f64);
        println!(
            "seed {seed}: {} episodes, final-10 mean return {:.3}",
            outcome.curve.len(),
            final_returns.last().unwrap()
        );
        curve.extend(outcome.curve);
        policies.push((seed, outcome.policy));
    }
    write_learning_curve(create(&out.join("learning_curve.csv"))?, &curve).map_err(io)?;

    let mut reports = Vec::new();
    for (seed, policy) in &policies {
        let report = evaluate(
            Some(policy),
            &cfg.scenario,
            &cfg.graph,
            setup.reward,
            cfg.eval.episodes,
            &[*seed],
        )
        .map_err(|e| Failure::runtime("eval", e))?;
        write_json(&out.join("eval").join(format!("seed{seed}.json")), &report)?;
        write_spacetime_files(out, &report)?;
        reports.push(report);
    }
    if dump_adjacency {
        let (seed, policy) = &policies[0];
        dump_adjacency_files(cfg, out, Some(policy), *seed)?;
    }
    let ret: Vec<f64> = reports.iter().map(|r| r.ret).collect();
    println!("evaluation mean return {:.3}", ret.iter().sum::<f64>() / ret.len() as f64);
    write_json(
        &out.join("run_summary.json"),
        &RunSummary {
            command: "train",
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            eval: None,
            final_returns: Some(final_returns),
            failed_cells: None,
        },
    )
}

fn write_spacetime_files(out: &Path, report: &EvalReport) -> Result<(), Failure> {
    let dir = out.join("spacetime");
    for st in &report.spacetime {
        write_spacetime(create(&dir.join(format!("seed{}.csv", st.seed)))?, &st.steps).map_err(io)?;
        write_speed_series(create(&dir.join(format!("seed{}_speed.csv", st.seed)))?, &st.steps).map_err(io)?;
        write_trajectory(create(&dir.join(format!("seed{}_trajectory.csv", st.seed)))?, &st.steps).map_err(io)?;
        write_routes(create(&dir.join(format!("seed{}_routes.csv", st.seed)))?, &st.steps).map_err(io)?;
    }
    Ok(())
}

/// Adjacency of every decision step of evaluation episode 0 of `seed`.
fn dump_adjacency_files(cfg: &RunConfig, out: &Path, policy: Option<&Policy>, seed: u64) -> Result<(), Failure> {
    let reward = cfg.reward.spec(&cfg.scenario.network, cfg.scenario.target_speed);
    let mut runner = EpisodeRunner::new(
        &cfg.scenario,
        &cfg.graph,
        reward,
        0,
        derive_seed(seed, EVAL_STREAM, 0),
        derive_rng(seed, EVAL_STREAM, u64::MAX),
        false,
    )
    .map_err(|e| Failure::runtime("eval", e))?;
    let dir = out.join("adjacency");
    fs::create_dir_all(&dir).map_err(io)?;
    while !runner.finished() {
        let sample = runner
            .advance(policy, ActionMode::Mean)
            .map_err(|e| Failure::runtime("eval", e))?;
        if let Some(s) = sample {
            let path = dir.join(format!("step{:06}.csv", s.time_step));
            s.adjacency.write_csv(create(&path)?).map_err(io)?;
        }
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, out: &Path, policy: Option<&Policy>, dump: bool, command: &str) -> Result<(), Failure> {
    let reward = cfg.reward.spec(&cfg.scenario.network, cfg.scenario.target_speed);
    let report = evaluate(policy, &cfg.scenario, &cfg.graph, reward, cfg.eval.episodes, &cfg.seeds)
        .map_err(|e| Failure::runtime("eval", e))?;
    write_json(&out.join("eval").join("report.json"), &report)?;
    write_spacetime_files(out, &report)?;
    if let Some(p) = policy {
        if cfg.scenario.cavs > 0 || !cfg.scenario.network.is_closed() {
            let check = decentralization_check(
                p,
                &cfg.scenario,
                &cfg.graph,
                reward,
                cfg.seeds[0],
                cfg.eval.decentralization_states,
                cfg.eval.decentralization_stride,
            )
            .map_err(|e| Failure::runtime("eval", e))?;
            println!(
                "decentralization: {} over {} states, max out-of-field change {:.1e}",
                if check.passed() { "pass" } else { "FAIL" },
                check.states,
                check.max_change
            );
            write_json(&out.join("eval").join("decentralization.json"), &check)?;
        }
    }
    if dump {
        dump_adjacency_files(cfg, out, policy, cfg.seeds[0])?;
    }
    println!(
        "mean velocity {:.4} m/s (std {:.4}), mean |accel| {:.4} m/s², return {:.3}, collision rate {:.3}",
        report.mean_velocity, report.mean_velocity_std, report.mean_abs_accel, report.ret, report.collision_rate
    );
    write_json(
        &out.join("run_summary.json"),
        &RunSummary {
            command,
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            eval: Some(&report),
            final_returns: None,
            failed_cells: None,
        },
    )
}

fn sweep_cmd(cfg: &RunConfig, out: &Path, variable: SweepVariable, values: &[String]) -> Result<(), Failure> {
    let spec = SweepSpec {
        variable,
        values: values.to_vec(),
        episodes: cfg.ppo.episodes,
        eval_episodes: cfg.eval.episodes,
        seeds: cfg.seeds.clone(),
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let base = cfg.train_setup();
    let rows = run_sweep(&base, &spec, threads).map_err(Failure::usage)?;
    write_sweep(create(&out.join("sweep.csv"))?, &rows).map_err(io)?;
    if variable == SweepVariable::TargetSpeed {
        write_target_speed_change(create(&out.join("target_speed_change.csv"))?, &target_speed_change(&rows))
            .map_err(io)?;
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell {}={} seed {} failed: {}",
            variable.name(),
            r.value,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    println!("{} cells, {failed} failed", rows.len());
    write_json(
        &out.join("run_summary.json"),
        &RunSummary {
            command: "sweep",
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            eval: None,
            final_returns: None,
            failed_cells: Some(failed),
        },
    )
}

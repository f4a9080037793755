//! `rof`: command-line front end for the RoF uplink simulator.
//!
//! Every command reads a TOML scenario and writes one CSV, to `--out` or to
//! stdout. Diagnostics go to stderr and are controlled by `ROF_LOG`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rof_core::fiber::{build_unit_response, phase_from_group_delay, RawMeasurement};
use rof_core::harness::{
    crlb_csv_body, crlb_table, csv_preamble, estimate_csv_body, estimate_from_samples, estimate_observation,
    load_scenario, read_samples_csv, run_csv_body, run_monte_carlo, run_positioning, samples_csv_body,
    simulate_observation, trial_rng, trials_csv_body, write_atomic, write_run, RunOptions, Scenario, SweepAxis,
    TrialRecord,
};
use rof_core::positioning::trajectory_csv_body;

#[derive(Parser)]
#[command(name = "rof", version, about = "Cascaded radio-over-fiber uplink simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Scenario file (TOML)
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Output CSV; stdout when omitted
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the scenario's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for trial execution
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Also write per-trial rows next to the output (`<out>.trials.csv`)
    #[arg(long, global = true)]
    dump_trials: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo sweep: RMSE, error rate and CRLB per sweep point
    Simulate,
    /// Estimate from a sample file, or from one simulated trial per point
    Estimate {
        /// `re,im` samples (frequency bins, or time samples for nonlinear chains)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Save the simulated samples of the first point (without --input)
        #[arg(long, conflicts_with = "input")]
        save_samples: Option<PathBuf>,
    },
    /// Cramér-Rao bounds across a sweep axis
    Crlb {
        /// sigma2, amplitude or bandwidth
        #[arg(long)]
        sweep: SweepAxis,
    },
    /// Positioning along a trajectory
    Position {
        /// `px_m,py_m` rows; defaults to the scenario's inline trajectory
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Smooth a fiber measurement and attach the integrated phase
    IngestChannel {
        /// `freq_hz,magnitude_db,group_delay_s` measurement
        #[arg(long)]
        input: PathBuf,
        /// Running-median window in samples
        #[arg(long, default_value_t = 1)]
        window: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROF_LOG", "warn")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Simulate => simulate(g),
        Command::Estimate { input, save_samples } => estimate(g, input.as_deref(), save_samples.as_deref()),
        Command::Crlb { sweep } => crlb(g, *sweep),
        Command::Position { trajectory } => position(g, trajectory.as_deref()),
        Command::IngestChannel { input, window } => ingest(g, input, *window),
    }
}

fn scenario(g: &Global) -> Result<Scenario> {
    let Some(path) = &g.scenario else {
        bail!("this command needs --scenario <path>");
    };
    let mut s = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn options(g: &Global) -> RunOptions {
    RunOptions { workers: g.workers }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn simulate(g: &Global) -> Result<()> {
    let s = scenario(g)?;
    let start = Instant::now();
    let result = run_monte_carlo(&s, options(g))?;
    info!("{} points x {} trials in {:.2?}", result.points.len(), s.trials, start.elapsed());
    match &g.out {
        Some(p) => write_run(p, &s, &result, g.dump_trials).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut text = csv_preamble(&s, "monte_carlo")?;
            text.push_str(&run_csv_body(&result));
            if g.dump_trials {
                text.push_str(&trials_csv_body(&result));
            }
            emit(None, &text)
        }
    }
}

fn estimate(g: &Global, input: Option<&Path>, save_samples: Option<&Path>) -> Result<()> {
    let s = scenario(g)?;
    let rows = match input {
        Some(path) => {
            let samples = read_samples_csv(path)?;
            vec![(0, None, estimate_from_samples(&s, &samples)?)]
        }
        None => {
            let mut rows = Vec::new();
            for (p, value) in s.sweep_points().into_iter().enumerate() {
                let setup = s.point_setup(value)?;
                let obs = simulate_observation(&setup, &mut trial_rng(s.seed, p as u64, 0))?;
                if p == 0 {
                    if let Some(path) = save_samples {
                        write_atomic(path, samples_csv_body(&obs.samples).as_bytes())
                            .with_context(|| format!("writing {}", path.display()))?;
                    }
                }
                let est = estimate_observation(&setup, &obs.pilot, &obs.samples, s.seed)
                    .with_context(|| format!("estimating sweep point {p}"))?;
                let truth = TrialRecord {
                    point: p,
                    trial: 0,
                    amplitude: obs.amplitude,
                    phase: setup.phase,
                    tau: setup.tau,
                    stages: setup.stages,
                    estimate: Some(est),
                };
                rows.push((p, Some(truth), est));
            }
            rows
        }
    };
    let mut text = csv_preamble(&s, "estimate")?;
    text.push_str(&estimate_csv_body(&rows));
    emit(g.out.as_deref(), &text)
}

fn crlb(g: &Global, axis: SweepAxis) -> Result<()> {
    let s = scenario(g)?;
    let rows = crlb_table(&s, axis)?;
    let mut text = csv_preamble(&s, "crlb")?;
    text.push_str(&crlb_csv_body(axis, &rows));
    emit(g.out.as_deref(), &text)
}

fn position(g: &Global, trajectory: Option<&Path>) -> Result<()> {
    let s = scenario(g)?;
    let report = run_positioning(&s, trajectory, options(g))?;
    info!("trajectory RMSE {:.4} m over {} estimates", report.rmse, report.rows.len());
    let mut text = csv_preamble(&s, "position")?;
    let _ = writeln!(text, "# rmse_m={:e}", report.rmse);
    text.push_str(&trajectory_csv_body(&report));
    emit(g.out.as_deref(), &text)
}

/// With a scenario the smoothed channel is resampled onto its grid;
/// otherwise it is written at the measurement's own frequencies.
fn ingest(g: &Global, input: &Path, window: usize) -> Result<()> {
    let meas = RawMeasurement::read_csv(input)?;
    let smooth = meas.smoothed(window)?;
    let text = match &g.scenario {
        Some(_) => {
            let s = scenario(g)?;
            let grid = s.point_setup(s.sweep_points()[0])?.grid;
            build_unit_response(&smooth, &grid)?.to_channel_csv_string()
        }
        None => {
            let phase = phase_from_group_delay(smooth.freqs(), smooth.group_delay())?;
            let mut text = String::from("freq_hz,magnitude_db,group_delay_s,phase_rad\n");
            for i in 0..phase.len() {
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    smooth.freqs()[i],
                    smooth.magnitude_db()[i],
                    smooth.group_delay()[i],
                    phase[i]
                );
            }
            text
        }
    };
    info!("ingested {} rows from {}", meas.freqs().len(), input.display());
    emit(g.out.as_deref(), &text)
}

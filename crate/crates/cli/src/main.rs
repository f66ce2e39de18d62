//! `fwav`: plan, simulate and score flapping-wing vehicle trajectories.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fwav_core::control::ControllerGains;
use fwav_core::defaults::{self, ParamSet};
use fwav_core::io;
use fwav_core::planner::{self, PiecewiseTrajectory, PlannerError, Scenario, CASE_NAMES};
use fwav_core::sim::{self, ModelKind, SimConfig, SimError, SimEvents};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "fwav", version, about = "Trajectory planning and tracking for a flapping-wing vehicle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a built-in scenario as TOML (all of them if no name is given).
    Cases { name: Option<String> },
    /// Plan a minimum-snap trajectory and write its coefficients.
    Plan {
        #[command(flatten)]
        source: ScenarioSource,
        /// Trajectory coefficient CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of sampled position and derivatives.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        sample_dt: f64,
    },
    /// Fly a planned trajectory in closed loop.
    Simulate {
        /// Trajectory coefficient CSV, as written by `plan`.
        #[arg(long)]
        trajectory: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Plan, then fly the result in closed loop.
    Track {
        #[command(flatten)]
        source: ScenarioSource,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Score a state log (or perfect playback) against a trajectory.
    Metrics {
        #[arg(long)]
        trajectory: PathBuf,
        /// State log; when omitted the trajectory itself is played back.
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        name: String,
        /// Metrics CSV to write; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the stored baseline table.
        #[arg(long)]
        baseline: bool,
    },
    /// Estimate the forward drag coefficient from a state log.
    Identify {
        #[arg(long)]
        states: PathBuf,
        /// Parameter TOML; the bundled defaults otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScenarioSource {
    /// Built-in case name (a, b, c, line).
    #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
    case: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the planner seed.
    #[arg(long)]
    plan_seed: Option<u64>,
    /// Overrides the number of planner restarts.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Vertical,
    Full,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "vertical")]
    model: Model,
    /// Controller gain TOML; nominal gains otherwise.
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Parameter TOML; the bundled defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Initial position offset magnitude (m), applied in a random direction.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    /// Seed for the perturbation direction.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dynamics step (s).
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Controller period (s).
    #[arg(long, default_value_t = 1e-2)]
    control_dt: f64,
    /// Time flown past the end of the trajectory (s).
    #[arg(long, default_value_t = 0.0)]
    extra_time: f64,
    /// Directory for state, control and metrics files.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        match cause.downcast_ref::<SimError>() {
            Some(SimError::Diverged { .. }) => return EXIT_DIVERGED,
            Some(SimError::Planner(PlannerError::Infeasible { .. })) => return EXIT_INFEASIBLE,
            _ => {}
        }
        if let Some(PlannerError::Infeasible { .. }) = cause.downcast_ref::<PlannerError>() {
            return EXIT_INFEASIBLE;
        }
    }
    EXIT_USAGE
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Cases { name } => {
            let names: Vec<String> = match name {
                Some(n) => vec![n],
                None => CASE_NAMES.iter().map(|s| s.to_string()).collect(),
            };
            for n in names {
                let scenario = planner::case_library(&n)?;
                emit(&format!("# case {n}\n{}\n", io::write_scenario(&scenario)?));
            }
            Ok(())
        }
        Command::Plan { source, out, samples, sample_dt } => {
            let traj = plan_scenario(&source)?;
            write_file(&out, |w| io::write_trajectory(&traj, w))?;
            if let Some(path) = samples {
                write_file(&path, |w| io::write_samples(&traj, sample_dt, w))?;
            }
            emit(&format!("wrote {} ({} segments, {:.2} s)\n", out.display(), traj.segments.len(), traj.duration()));
            Ok(())
        }
        Command::Simulate { trajectory, sim } => {
            let traj = read_trajectory(&trajectory)?;
            let name = trajectory.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            fly(&traj, &name, &sim)
        }
        Command::Track { source, sim } => {
            let traj = plan_scenario(&source)?;
            fs::create_dir_all(&sim.out_dir).with_context(|| format!("creating {}", sim.out_dir.display()))?;
            write_file(&sim.out_dir.join("trajectory.csv"), |w| io::write_trajectory(&traj, w))?;
            let name = source.case.clone().unwrap_or_else(|| "scenario".into());
            fly(&traj, &name, &sim)
        }
        Command::Metrics { trajectory, states, name, out, baseline } => {
            let traj = read_trajectory(&trajectory)?;
            let positions = match states {
                Some(path) => {
                    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    io::read_states(BufReader::new(file))?.iter().map(|r| (r.t, r.p)).collect()
                }
                None => playback(&traj)?,
            };
            let rows = vec![(name, sim::compute_metrics(&positions, &traj)?)];
            match out {
                Some(path) => write_file(&path, |w| io::write_metrics(&rows, w))?,
                None => {
                    let mut buf = Vec::new();
                    io::write_metrics(&rows, &mut buf)?;
                    emit(&String::from_utf8_lossy(&buf));
                }
            }
            if baseline {
                emit(&format!("baseline\n{}", io::metrics_summary(&io::flight_baseline())));
            }
            Ok(())
        }
        Command::Identify { states, params } => {
            let set = load_params(params.as_deref())?;
            let file = File::open(&states).with_context(|| format!("opening {}", states.display()))?;
            let rows = io::read_states(BufReader::new(file))?;
            let estimate = sim::identify_drag(&sim::drag_samples_from_states(&rows, &set.vertical))?;
            emit(&format!(
                "k_d/m = {:.6} 1/m\nsamples used = {}\nresidual norm = {:.6e}\nexcitation = {:.6e}\nconfigured k_d/m = {:.6} 1/m\n",
                estimate.k_d_over_m,
                estimate.samples_used,
                estimate.residual_norm,
                estimate.excitation,
                set.vertical.vk_d_x / set.vertical.m
            ));
            Ok(())
        }
    }
}

fn plan_scenario(source: &ScenarioSource) -> Result<PiecewiseTrajectory> {
    let mut scenario: Scenario = match (&source.case, &source.scenario) {
        (Some(name), None) => planner::case_library(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            io::read_scenario(&text)?
        }
        _ => bail!("exactly one of --case or --scenario is required"),
    };
    if let Some(seed) = source.plan_seed {
        scenario.options.seed = seed;
    }
    if let Some(restarts) = source.restarts {
        scenario.options.restarts = restarts;
    }
    let result = planner::plan(&scenario.constraints, &scenario.weights, &scenario.options)
        .with_context(|| format!("planning {}", scenario.name))?;
    log::info!(
        "{}: objective {:.4e}, {} of {} restarts feasible",
        scenario.name,
        result.report.objective,
        result.report.feasible_restarts,
        result.report.restarts.len()
    );
    Ok(result.trajectory)
}

fn fly(traj: &PiecewiseTrajectory, name: &str, args: &SimArgs) -> Result<()> {
    let set = load_params(args.params.as_deref())?;
    let gains = match &args.gains {
        Some(path) => io::read_gains(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => ControllerGains::nominal(),
    };
    if !(args.perturb >= 0.0 && args.perturb.is_finite()) {
        bail!("--perturb must be a non-negative number");
    }
    let config = SimConfig {
        model: match args.model {
            Model::Vertical => ModelKind::Vertical,
            Model::Full => ModelKind::Full,
        },
        dt: args.dt,
        control_dt: args.control_dt,
        extra_time: args.extra_time,
        gains,
        position_offset: random_direction(args.seed) * args.perturb,
        ..SimConfig::default()
    };
    let run = sim::run_closed_loop(traj, &set.vertical, &set.full, &config)?;
    let metrics = sim::compute_metrics(&run.positions(), traj)?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_file(&args.out_dir.join("states.csv"), |w| io::write_states(&run.states, w))?;
    write_file(&args.out_dir.join("controls.csv"), |w| io::write_controls(&run.controls, w))?;
    let rows = vec![(name.to_string(), metrics)];
    write_file(&args.out_dir.join("metrics.csv"), |w| io::write_metrics(&rows, w))?;

    emit(&(io::metrics_summary(&rows) + &event_summary(&run.events)));
    Ok(())
}

fn event_summary(events: &SimEvents) -> String {
    let mut s = format!(
        "  heading jumps {}  (h changes {})\n  heading-rate saturation episodes {}  ({} ticks)\n",
        events.jump_times.len(),
        events.h_change_times.len(),
        events.saturation_episodes,
        events.saturated_ticks
    );
    if events.degenerate_ticks > 0 {
        s.push_str(&format!("  degenerate decomposition ticks {}\n", events.degenerate_ticks));
    }
    s
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

/// Uniformly distributed unit vector.
fn random_direction(seed: u64) -> Vector3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

fn playback(traj: &PiecewiseTrajectory) -> Result<Vec<(f64, Vector3<f64>)>> {
    let n = (traj.duration() / 0.01).round() as usize;
    (0..=n)
        .map(|i| {
            let t = (i as f64 * 0.01).min(traj.duration());
            Ok((t, traj.eval(t, 0)?))
        })
        .collect()
}

fn load_params(path: Option<&Path>) -> Result<ParamSet> {
    match path {
        Some(p) => Ok(io::read_params(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => Ok(defaults::param_set()),
    }
}

fn read_trajectory(path: &Path) -> Result<PiecewiseTrajectory> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::read_trajectory(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), io::IoError>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

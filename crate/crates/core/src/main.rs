use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use rydberg_singlet::par::Execution;
use rydberg_singlet::scenarios::{
    ensemble_csv, preset, run_noise_ensemble, run_scenario, run_sweep, sweep_csv, trajectory_csv,
    Health, LabUnits, Scenario, ScenarioError, PRESET_NAMES,
};

#[derive(Parser)]
#[command(
    name = "rydberg-singlet",
    version,
    about = "Dissipative and feedback preparation of a two-atom Rydberg singlet"
)]
struct Cli {
    /// More diagnostics on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in scenario (see `presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Scenario config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<Scenario, ScenarioError> {
        match (&self.preset, &self.config) {
            (Some(name), _) => preset(name),
            (_, Some(path)) => Scenario::load(path),
            _ => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write the trajectory CSV.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Largest step in dimensionless time Ω_r t.
        #[arg(long)]
        dt: Option<f64>,
        /// Final dimensionless time Ω_r t.
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Evaluate the scenario's two-parameter sweep.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (1 = sequential; default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Monte Carlo average over sampled noise realizations.
    Noise {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// List built-in scenarios, or print one as a config file.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
    /// Convert dimensionless time to laboratory time.
    Units {
        /// Time in units of 2π/Ω_r.
        t_over_2pi: f64,
        /// Ω_r/2π in MHz.
        #[arg(long, default_value_t = 4.0)]
        omega_r_mhz: f64,
        /// γ/2π in MHz.
        #[arg(long, default_value_t = 0.007)]
        gamma_mhz: f64,
    },
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), ScenarioError> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| ScenarioError::Io(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| ScenarioError::Io(e.to_string())),
    }
}

fn report_health(health: &Health) -> ExitCode {
    if health.ok() {
        log::info!("{health}");
        ExitCode::SUCCESS
    } else {
        eprintln!("invariant check failed: {health}");
        ExitCode::from(2)
    }
}

fn execute(cmd: Command) -> Result<ExitCode, ScenarioError> {
    match cmd {
        Command::Run {
            source,
            out,
            dt,
            t_end,
        } => {
            let mut s = source.load()?;
            if let Some(dt) = dt {
                s.dt = Some(dt);
            }
            if let Some(t) = t_end {
                s.t_end = t;
            }
            if s.sweep.is_some() {
                log::warn!(
                    "'{}' defines a sweep; `run` integrates only the base point",
                    s.name
                );
                s.sweep = None;
            }
            eprintln!("{}: {}", s.name, s.summary());
            let result = run_scenario(&s)?;
            write_output(out.as_deref(), &trajectory_csv(&result.trajectory.records))?;
            let last = result.trajectory.last();
            let lab = LabUnits::cesium_64p();
            eprintln!(
                "Ω_r t/2π = {:.1} ({:.4} ms at Ω_r/2π = {} MHz): P_D = {:.6}, F = {:.6}, {} steps of {:.4e}",
                last.t / TAU,
                lab.time_ms(last.t),
                lab.omega_r_over_2pi_mhz,
                last.p_d,
                last.fidelity,
                (s.t_end / result.trajectory.dt).round(),
                result.trajectory.dt
            );
            Ok(report_health(&result.health))
        }
        Command::Sweep { source, out, jobs } => {
            let s = source.load()?;
            eprintln!("{}: {}", s.name, s.summary());
            let result = run_sweep(&s, Execution::from_jobs(jobs))?;
            write_output(Some(&out), &sweep_csv(&result))?;
            eprintln!(
                "wrote {} grid points to {}",
                result.rows.len(),
                out.display()
            );
            Ok(report_health(&result.health))
        }
        Command::Noise {
            source,
            trajectories,
            seed,
            out,
            jobs,
        } => {
            let s = source.load()?;
            let n = trajectories.unwrap_or(s.noise.trajectories);
            let seed = seed.unwrap_or(s.noise.seed);
            eprintln!(
                "{}: {}; {} trajectories from seed {}",
                s.name,
                s.summary(),
                n,
                seed
            );
            let summary = run_noise_ensemble(&s, n, seed, Execution::from_jobs(jobs))?;
            write_output(Some(&out), &ensemble_csv(&summary))?;
            let (last, se) = summary.last();
            eprintln!(
                "Ω_r t/2π = {:.1}: F = {:.6} ± {:.2e}, P_D = {:.6}",
                last.t / TAU,
                last.fidelity,
                se,
                last.p_d
            );
            let health = Health {
                max_trace_err: summary
                    .records
                    .iter()
                    .map(|r| r.trace_err.abs())
                    .fold(0.0, f64::max),
                min_eig: summary
                    .records
                    .iter()
                    .map(|r| r.min_eig)
                    .fold(f64::INFINITY, f64::min),
                renormalizations: 0,
            };
            Ok(report_health(&health))
        }
        Command::Presets { show } => {
            match show {
                Some(name) => print!("{}", preset(&name)?.to_config_string()),
                None => {
                    for name in PRESET_NAMES {
                        println!("{name:6}  {}", preset(name)?.summary());
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Units {
            t_over_2pi,
            omega_r_mhz,
            gamma_mhz,
        } => {
            if !(omega_r_mhz > 0.0) {
                return Err(ScenarioError::Validation {
                    field: "--omega-r-mhz".into(),
                    reason: "must be positive".into(),
                });
            }
            let lab = LabUnits {
                omega_r_over_2pi_mhz: omega_r_mhz,
                gamma_over_2pi_mhz: gamma_mhz,
            };
            println!(
                "Ω_r t/2π = {t_over_2pi} -> t = {:.6} ms; γ/Ω_r = {:.6}",
                lab.time_ms(t_over_2pi * TAU),
                lab.gamma_ratio()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! `lgq`: simulations, estimation runs, stationary analysis, sweeps and
//! verification checks for linear Gaussian quantum systems.
//!
//! Exit status is 0 on success, 2 for invalid input and 3 for numerical
//! failure. Every file output is accompanied by a manifest JSON.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use lgq_core::analysis::{
    efficiency_scan, log_grid, mc_consistency, snapshot_states, sweep_rpr, swv_crossing, HIGH_EFFICIENCY_ETA_U,
};
use lgq_core::estimation::run_estimation;
use lgq_core::io::{
    efficiency_csv, estimation_csv, json_bytes, load_system, optimal_phase_csv, sweep_csv, trajectory_csv, write_atomic,
};
use lgq_core::steady::{low_efficiency_check, rpr_high_efficiency_check, steady_report};
use lgq_core::trajectory::simulate_true;
use lgq_core::{build_opo, Error, LgqSystem, OpoParams, Result, TimeGrid, Vector};

#[derive(Parser, Debug)]
#[command(
    name = "lgq",
    version,
    about = "Quantum state smoothing for linear Gaussian quantum systems"
)]
struct Cli {
    /// Worker threads for sweeps and ensembles (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Simulate a true-state trajectory and its measurement records.
    Simulate {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
    /// Simulate, then filter, retrofilter and smooth the observed record.
    Estimate {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Stationary conditioned variances and purities.
    SteadyState {
        #[command(flatten)]
        system: SystemArgs,
        /// JSON output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stationary RPR over a square (θ_o, θ_u) grid, plus the optimal θ_u curve.
    SweepRpr {
        #[arg(long, default_value_t = 0.5)]
        eta_o: f64,
        /// Cells per phase axis.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        hbar: f64,
        #[arg(long, default_value = "rpr.csv")]
        out: PathBuf,
    },
    /// Stationary purities against η_o with η_u = 1 - η_o.
    EfficiencyScan {
        #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
        theta_o: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta_u: f64,
        #[arg(long, default_value_t = 1e-4)]
        eta_min: f64,
        #[arg(long, default_value_t = 0.99)]
        eta_max: f64,
        /// Log-spaced scan points.
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        hbar: f64,
        #[arg(long, default_value = "efficiency.csv")]
        out: PathBuf,
    },
    /// Wigner 1-SD contours of the five states at one time of a single-mode run.
    Snapshot {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Snapshot time (default: half the horizon).
        #[arg(long)]
        at: Option<f64>,
        #[arg(long, default_value = "snapshot.json")]
        out: PathBuf,
    },
    /// Monte-Carlo check of the filtered and smoothed error covariances.
    VerifyMc {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 4.0)]
        t_final: f64,
        #[arg(long, default_value_t = 10_000)]
        n_traj: usize,
        #[arg(long, env = "LGQ_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mc.json")]
        out: PathBuf,
    },
    /// Numerical stationary purities against the efficiency asymptotics.
    Asymptotics {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long, default_value_t = FRAC_PI_4, allow_hyphen_values = true)]
        theta_o: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta_u: f64,
        /// Observed efficiency (low regime only).
        #[arg(long, default_value_t = 1e-4)]
        eta_o: f64,
        #[arg(long, default_value_t = 1.0)]
        hbar: f64,
        /// JSON output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RegimeArg {
    Low,
    High,
}

/// Either OPO parameters or a system file.
#[derive(Args, Debug, Clone, Serialize)]
struct SystemArgs {
    /// Observed homodyne phase [default: π/3].
    #[arg(long, allow_hyphen_values = true, conflicts_with = "system")]
    theta_o: Option<f64>,
    /// Unobserved homodyne phase [default: 0.2].
    #[arg(long, allow_hyphen_values = true, conflicts_with = "system")]
    theta_u: Option<f64>,
    /// Observed efficiency [default: 0.5].
    #[arg(long, conflicts_with = "system")]
    eta_o: Option<f64>,
    /// Unobserved efficiency [default: 1 - η_o].
    #[arg(long, conflicts_with = "system")]
    eta_u: Option<f64>,
    /// Reduced Planck constant [default: 1].
    #[arg(long, conflicts_with = "system")]
    hbar: Option<f64>,
    /// JSON system file (explicit matrices or an "opo" block).
    #[arg(long)]
    system: Option<PathBuf>,
}

impl SystemArgs {
    fn opo(&self) -> OpoParams {
        let eta_o = self.eta_o.unwrap_or(0.5);
        OpoParams {
            theta_o: self.theta_o.unwrap_or(FRAC_PI_3),
            theta_u: self.theta_u.unwrap_or(0.2),
            eta_o,
            eta_u: self.eta_u.unwrap_or(1.0 - eta_o),
            hbar: self.hbar.unwrap_or(1.0),
        }
    }

    fn build(&self) -> Result<LgqSystem> {
        match &self.system {
            Some(path) => load_system(path),
            None => build_opo(&self.opo()),
        }
    }

    /// The resolved configuration, for the manifest.
    fn resolved(&self) -> serde_json::Value {
        match &self.system {
            Some(path) => json!({ "system_file": path }),
            None => json!({ "opo": self.opo() }),
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct GridArgs {
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 10.0)]
    t_final: f64,
    /// Falls back to LGQ_SEED.
    #[arg(long, env = "LGQ_SEED", default_value_t = 0)]
    seed: u64,
}

impl GridArgs {
    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.t_final, self.dt)
    }
}

/// A pending file write; nothing touches disk until every artifact of a
/// command has been computed.
struct Artifact {
    path: PathBuf,
    bytes: Vec<u8>,
}

struct Outcome {
    artifacts: Vec<Artifact>,
    manifest: Option<PathBuf>,
    stdout: Option<Vec<u8>>,
    seed: Option<u64>,
    resolved: serde_json::Value,
}

impl Outcome {
    fn files(artifacts: Vec<Artifact>, manifest: PathBuf) -> Self {
        Outcome {
            artifacts,
            manifest: Some(manifest),
            stdout: None,
            seed: None,
            resolved: serde_json::Value::Null,
        }
    }

    /// JSON to `out`, or to stdout without a manifest.
    fn json_to(value: &impl Serialize, out: &Option<PathBuf>) -> Result<Self> {
        let bytes = json_bytes(value)?;
        Ok(match out {
            Some(path) => Outcome::files(
                vec![Artifact {
                    path: path.clone(),
                    bytes,
                }],
                manifest_path(path),
            ),
            None => Outcome {
                artifacts: Vec::new(),
                manifest: None,
                stdout: Some(bytes),
                seed: None,
                resolved: serde_json::Value::Null,
            },
        })
    }

    fn seeded(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn with_resolved(mut self, resolved: serde_json::Value) -> Self {
        self.resolved = resolved;
        self
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn check_pass(what: &str, pass: bool) {
    if pass {
        eprintln!("{what}: pass");
    } else {
        eprintln!("{what}: FAIL");
    }
}

fn execute(command: &Command) -> Result<Outcome> {
    match command {
        Command::Simulate { system, grid, out } => {
            let sys = system.build()?;
            let tg = grid.grid()?;
            let (traj, record) = simulate_true(&sys, &sys.vacuum(), &Vector::zeros(sys.dim()), &tg, grid.seed)?;
            let bytes = trajectory_csv(&traj, &record)?;
            Ok(Outcome::files(
                vec![Artifact {
                    path: out.clone(),
                    bytes,
                }],
                manifest_path(out),
            )
            .seeded(grid.seed)
            .with_resolved(system.resolved()))
        }
        Command::Estimate { system, grid, out } => {
            let sys = system.build()?;
            let tg = grid.grid()?;
            let x0 = Vector::zeros(sys.dim());
            let (traj, record) = simulate_true(&sys, &sys.vacuum(), &x0, &tg, grid.seed)?;
            let run = run_estimation(&sys, &record.observed_only(), &x0, &sys.vacuum())?;
            let artifacts = vec![
                Artifact {
                    path: out.join("trajectory.csv"),
                    bytes: trajectory_csv(&traj, &record)?,
                },
                Artifact {
                    path: out.join("estimation.csv"),
                    bytes: estimation_csv(&run)?,
                },
            ];
            Ok(Outcome::files(artifacts, out.join("manifest.json"))
                .seeded(grid.seed)
                .with_resolved(system.resolved()))
        }
        Command::SteadyState { system, out } => {
            let sys = system.build()?;
            let report = steady_report(&sys)?;
            Ok(Outcome::json_to(&report, out)?.with_resolved(system.resolved()))
        }
        Command::SweepRpr { eta_o, grid, hbar, out } => {
            if *grid == 0 {
                return Err(Error::InvalidArgument("--grid must be positive".into()));
            }
            OpoParams::complementary(0.0, 0.0, *eta_o, *hbar).validate()?;
            let sweep = sweep_rpr(*eta_o, *grid, *hbar)?;
            let undefined = sweep.points.iter().filter(|p| p.rpr.is_none()).count();
            if undefined > 0 {
                log::warn!("RPR undefined at {undefined} grid points");
            }
            let artifacts = vec![
                Artifact {
                    path: out.clone(),
                    bytes: sweep_csv(&sweep)?,
                },
                Artifact {
                    path: sibling(out, "optimal.csv"),
                    bytes: optimal_phase_csv(&sweep)?,
                },
            ];
            Ok(Outcome::files(artifacts, manifest_path(out)))
        }
        Command::EfficiencyScan {
            theta_o,
            theta_u,
            eta_min,
            eta_max,
            points,
            hbar,
            out,
        } => {
            if *points == 0 || !(*eta_min > 0.0 && eta_min <= eta_max && *eta_max < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "need 0 < eta_min <= eta_max < 1 and at least one point, got [{eta_min}, {eta_max}] x {points}"
                )));
            }
            let scan = efficiency_scan(*theta_o, *theta_u, &log_grid(*eta_min, *eta_max, *points), *hbar)?;
            match swv_crossing(&scan) {
                Some(eta) => log::info!("P_SWV crosses 1 at eta_o = {eta:.4}"),
                None => log::info!("P_SWV does not cross 1 on this scan"),
            }
            let bytes = efficiency_csv(&scan)?;
            Ok(Outcome::files(
                vec![Artifact {
                    path: out.clone(),
                    bytes,
                }],
                manifest_path(out),
            ))
        }
        Command::Snapshot { system, grid, at, out } => {
            let sys = system.build()?;
            let tg = grid.grid()?;
            let t = at.unwrap_or(tg.time(tg.n_steps() / 2));
            tg.index_of(t)?;
            let x0 = Vector::zeros(sys.dim());
            let (traj, record) = simulate_true(&sys, &sys.vacuum(), &x0, &tg, grid.seed)?;
            let run = run_estimation(&sys, &record.observed_only(), &x0, &sys.vacuum())?;
            let states = snapshot_states(&sys, &traj, &run, &x0, t)?;
            let bytes = json_bytes(&json!({ "t": t, "states": states }))?;
            Ok(Outcome::files(
                vec![Artifact {
                    path: out.clone(),
                    bytes,
                }],
                manifest_path(out),
            )
            .seeded(grid.seed)
            .with_resolved(system.resolved()))
        }
        Command::VerifyMc {
            system,
            dt,
            t_final,
            n_traj,
            seed,
            out,
        } => {
            let sys = system.build()?;
            let tg = TimeGrid::new(0.0, *t_final, *dt)?;
            let report = mc_consistency(&sys, &tg, *n_traj, *seed)?;
            for p in &report.probes {
                eprintln!(
                    "t = {:.3}: filtered {:.4}, smoothed {:.4} (relative to largest entry)",
                    p.t, p.filtered_rel_error, p.smoothed_rel_error
                );
            }
            check_pass("monte-carlo consistency", report.pass);
            let bytes = json_bytes(&report)?;
            Ok(Outcome::files(
                vec![Artifact {
                    path: out.clone(),
                    bytes,
                }],
                manifest_path(out),
            )
            .seeded(*seed)
            .with_resolved(system.resolved()))
        }
        Command::Asymptotics {
            regime,
            theta_o,
            theta_u,
            eta_o,
            hbar,
            out,
        } => match regime {
            RegimeArg::Low => {
                let check = low_efficiency_check(*theta_o, *theta_u, *eta_o, *hbar)?;
                eprintln!(
                    "P_F numeric/analytic = {:.4}, P_SWV numeric/analytic = {:.4}",
                    check.purity_f_ratio, check.purity_swv_ratio
                );
                check_pass("low-efficiency asymptotics", check.pass);
                Outcome::json_to(&check, out)
            }
            RegimeArg::High => {
                let fit = rpr_high_efficiency_check(*theta_o, *theta_u, *hbar, &HIGH_EFFICIENCY_ETA_U)?;
                let q_ok = fit.points.iter().all(|p| p.q_error_ratio.is_some_and(|r| r <= 5.0));
                let pass = fit.max_residual <= 0.1 && q_ok;
                eprintln!("RPR slope = {:.6}, max residual = {:.4}", fit.slope, fit.max_residual);
                check_pass("high-efficiency asymptotics", pass);
                Outcome::json_to(&json!({ "fit": fit, "pass": pass }), out)
            }
        },
    }
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn finish(command: &Command, threads: Option<usize>, outcome: Outcome) -> Result<()> {
    if let Some(bytes) = &outcome.stdout {
        use std::io::Write;
        std::io::stdout().write_all(bytes)?;
    }
    for a in &outcome.artifacts {
        write_atomic(&a.path, &a.bytes)?;
        log::info!("wrote {}", a.path.display());
    }
    if let Some(path) = &outcome.manifest {
        let manifest = json!({
            "config": command,
            "resolved": outcome.resolved,
            "threads": threads.unwrap_or_else(rayon::current_num_threads),
            "seed": outcome.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp_unix": unix_time(),
            "outputs": outcome.artifacts.iter().map(|a| &a.path).collect::<Vec<_>>(),
        });
        write_atomic(path, &json_bytes(&manifest)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli.command).and_then(|outcome| finish(&cli.command, cli.threads, outcome)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

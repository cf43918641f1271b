//! Argument parsing, dispatch, file emission and exit status.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::{self, Command, Extra, Outcome};
use crate::config::{ConfigError, Format, Overrides, RunConfig};
use crate::output::{write_file, RunManifest};
use crate::selftest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

/// Simulate correlated dephasing of a bosonic double well and its
/// cancellation by an ancilla.
///
/// Values come from the built-in defaults, then the `--config` TOML file,
/// then command-line flags. Keys shown as per-subcommand take the values
/// listed under each subcommand's help.
#[derive(Debug, Parser)]
#[command(name = "decoh", version, allow_negative_numbers = true)]
pub struct Cli {
    /// TOML configuration file (tables or flat dotted keys; unknown keys are errors), or a run manifest `.json`
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// NOON fidelity against time for a list of couplings.
    ///
    /// Defaults: lambda 0.5, t_final 50, dt 0.05, alphas alpha_c, 0.75 alpha_c, 0.
    /// With `--method trajectories`: n_traj 200 and the configured noise kind.
    #[command(allow_negative_numbers = true)]
    Fig2 {
        /// Comma-separated couplings
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        alphas: Option<Vec<f64>>,
    },
    /// Time-averaged fidelity against coupling for several dephasing strengths.
    ///
    /// Defaults: lambdas 0.05,0.1,0.5, alpha window [2 alpha_c, 6] (or
    /// [-6, 2 alpha_c] for alpha_c > 0), alpha step 0.05, averaging horizon up to
    /// t_final 800 with dt 0.05.
    #[command(allow_negative_numbers = true)]
    Fig3a {
        /// Comma-separated dephasing strengths
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Coupling grid spacing
        #[arg(long)]
        alpha_step: Option<f64>,
    },
    /// Time-averaged fidelity sweeps for several boson numbers; the ancilla holds as many bosons as the system.
    ///
    /// Defaults: ns 1,3,5,7, lambdas 0.1, eta_s 1, the fig3a window, step and horizon.
    #[command(allow_negative_numbers = true)]
    Fig3b {
        /// Comma-separated system boson numbers
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        /// Comma-separated dephasing strengths
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Coupling grid spacing
        #[arg(long)]
        alpha_step: Option<f64>,
    },
    /// Residual dephasing with an imperfectly prepared ancilla, by full propagation and by the effective rate.
    ///
    /// Defaults: lambda 0.1, t_final 20000. The system is static (eta = gamma = 0,
    /// Delta = -1) and the ancilla is enlarged until the preparation mixture fits.
    Robustness,
    /// Ensemble NOON coherence decay with the cancellation condition satisfied and violated.
    ///
    /// Defaults: kind ou, lambda 0.1, t_final 50, dt 0.01, n_traj 1000.
    Colored,
    /// Generic coupling sweep of the time-averaged fidelity.
    ///
    /// Defaults: lambda 0.1, the fig3a window, step and horizon.
    #[command(allow_negative_numbers = true)]
    Sweep {
        #[arg(long, allow_negative_numbers = true)]
        alpha_min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        alpha_max: Option<f64>,
        #[arg(long)]
        alpha_step: Option<f64>,
    },
    /// Single-system trajectory ensemble against the master equation.
    ///
    /// Defaults: kind white, lambda 0.1, t_final 20, dt 0.001, n_traj 4000.
    Trajectories,
    /// Invariant checks across all modules; exits 2 if any fails.
    Selftest,
}

/// A failed selftest, reported with the numerical exit status.
#[derive(Debug)]
pub struct SelftestFailed(pub usize);

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} selftest check(s) failed", self.0)
    }
}

impl std::error::Error for SelftestFailed {}

/// Exit status for an error: 1 for usage and configuration problems, 2 for
/// violated numerical invariants.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
        if cause.is::<SelftestFailed>() {
            return EXIT_NUMERICAL;
        }
        if let Some(err) = cause.downcast_ref::<decoh_core::Error>() {
            return match err {
                decoh_core::Error::InvalidParameter { .. } => EXIT_USAGE,
                _ => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_USAGE
}

pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn split(sub: &Sub) -> (Option<Command>, Extra) {
    match sub {
        Sub::Fig2 { alphas } => (
            Some(Command::Fig2),
            Extra {
                alphas: alphas.clone(),
                ..Extra::default()
            },
        ),
        Sub::Fig3a { lambdas, alpha_step } => (
            Some(Command::Fig3a),
            Extra {
                lambdas: lambdas.clone(),
                alpha_step: *alpha_step,
                ..Extra::default()
            },
        ),
        Sub::Fig3b { ns, lambdas, alpha_step } => (
            Some(Command::Fig3b),
            Extra {
                ns: ns.clone(),
                lambdas: lambdas.clone(),
                alpha_step: *alpha_step,
                ..Extra::default()
            },
        ),
        Sub::Robustness => (Some(Command::Robustness), Extra::default()),
        Sub::Colored => (Some(Command::Colored), Extra::default()),
        Sub::Sweep {
            alpha_min,
            alpha_max,
            alpha_step,
        } => (
            Some(Command::Sweep),
            Extra {
                alpha_min: *alpha_min,
                alpha_max: *alpha_max,
                alpha_step: *alpha_step,
                ..Extra::default()
            },
        ),
        Sub::Trajectories => (Some(Command::Trajectories), Extra::default()),
        Sub::Selftest => (None, Extra::default()),
    }
}

/// Defaults, then file, then flags, then per-subcommand defaults.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides);
    let (cmd, _) = split(&cli.command);
    cfg.resolve(&cmd.unwrap_or(Command::Fig3a).defaults());
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let cfg = resolve_config(cli)?;
    let (cmd, extra) = split(&cli.command);
    let name = cmd.map_or("selftest", Command::name);
    let outcome = match cmd {
        Some(c) => commands::run(c, &cfg, &extra)?,
        None => run_selftest(&cfg),
    };
    let failed = outcome.summary.get("failed").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    emit(name, &cfg, outcome, start)?;
    if failed > 0 {
        return Err(SelftestFailed(failed).into());
    }
    Ok(())
}

fn run_selftest(cfg: &RunConfig) -> Outcome {
    let results = selftest::run_all(cfg.run.seed);
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let table = selftest::results_table(&results);
    let plot = crate::output::Plot::from_table("Selftest", "value", &table);
    Outcome {
        summary: json!({
            "failed": failed,
            "checks": results.iter().map(|r| json!({
                "name": r.name,
                "passed": r.passed,
                "value": r.value,
                "detail": r.detail,
            })).collect::<Vec<_>>(),
        }),
        artifacts: vec![commands::Artifact {
            stem: "selftest".into(),
            table,
            plot,
        }],
    }
}

fn emit(name: &str, cfg: &RunConfig, outcome: Outcome, start: Instant) -> Result<()> {
    let dir = cfg.out_dir();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    for a in &outcome.artifacts {
        if cfg.wants(Format::Csv) {
            files.push(write_file(dir, &format!("{}.csv", a.stem), a.table.to_csv().as_bytes())?);
        }
        if cfg.wants(Format::Svg) {
            files.push(write_file(dir, &format!("{}.svg", a.stem), a.plot.to_svg().as_bytes())?);
        }
    }
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.run.seed,
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        files,
        summary: cfg.wants(Format::Json).then_some(outcome.summary),
    };
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("decoh").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn negative_values_parse() {
        let cli = parse(&["fig2", "--n", "1", "--ell", "0.5", "--alphas=-2,-1.5,0", "--lambda", "0.5"]);
        match &cli.command {
            Sub::Fig2 { alphas } => assert_eq!(alphas.as_deref(), Some(&[-2.0, -1.5, 0.0][..])),
            other => panic!("parsed {other:?}"),
        }
        let cli = parse(&["sweep", "--alpha-min", "-3", "--delta-s", "-1"]);
        assert_eq!(cli.overrides.delta_s, Some(-1.0));
    }

    #[test]
    fn subcommand_defaults_fill_unset_keys() {
        let cfg = resolve_config(&parse(&["colored"])).unwrap();
        assert_eq!(cfg.lambda(), 0.1);
        assert_eq!(cfg.n_traj(), 1000);
        assert_eq!(cfg.noise.kind, Some(crate::config::KindName::Ou));
        let cfg = resolve_config(&parse(&["fig2", "--lambda", "0.25"])).unwrap();
        assert_eq!(cfg.lambda(), 0.25);
        assert_eq!(cfg.t_final(), 50.0);
    }

    #[test]
    fn trajectories_method_rejected_for_sweeps() {
        let cli = parse(&["sweep", "--method", "trajectories"]);
        let err = execute(&cli).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        assert!(format!("{err}").contains("run.method"));
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let e: anyhow::Error = decoh_core::Error::Drift("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_NUMERICAL);
        let e: anyhow::Error = decoh_core::Error::InvalidParameter {
            name: "dt",
            constraint: "x".into(),
        }
        .into();
        assert_eq!(exit_code(&e), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow::Error::new(SelftestFailed(1))), EXIT_NUMERICAL);
    }
}

//! Subcommand implementations. Each one turns a resolved configuration into
//! tables, plots and summary scalars; writing them is left to the caller.

use anyhow::{Context, Result};
use decoh_core::experiments::{
    alpha_grid, alpha_sweep, colored_noise_run, default_window, fidelity, noon_trace, robustness_run,
    stochastic_equivalence, Horizon, NoonSetup, RobustnessParams, StochasticParams, SweepResult, ColoredParams,
};
use decoh_core::fit::linear_fit;
use decoh_core::lindblad::{jump_operators, mixed_ancilla_state};
use decoh_core::matrixcore::projector_of;
use decoh_core::noise::{build_correlation, NoiseKind, NoiseModel};
use decoh_core::spinops::{build_h0, build_ha, build_hs, make_spin, SystemParams};
use decoh_core::trajectories::{ensemble_density_range, DiagonalJumps, TrajectoryConfig};
use serde_json::json;

use crate::config::{ConfigError, Defaults, KindName, Method, RunConfig};
use crate::output::{Plot, Table};

/// One CSV with its plot, written as `<stem>.csv` and `<stem>.svg`.
pub struct Artifact {
    pub stem: String,
    pub table: Table,
    pub plot: Plot,
}

pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
}

/// Subcommand-specific values that only exist on the command line.
#[derive(Clone, Debug, Default)]
pub struct Extra {
    pub alphas: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
    pub ns: Option<Vec<usize>>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub alpha_step: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Fig2,
    Fig3a,
    Fig3b,
    Robustness,
    Colored,
    Sweep,
    Trajectories,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fig2 => "fig2",
            Command::Fig3a => "fig3a",
            Command::Fig3b => "fig3b",
            Command::Robustness => "robustness",
            Command::Colored => "colored",
            Command::Sweep => "sweep",
            Command::Trajectories => "trajectories",
        }
    }

    pub fn defaults(self) -> Defaults {
        let horizon = Horizon::default();
        let base = Defaults {
            eta_s: 0.0,
            kind: KindName::White,
            lambda: 0.1,
            t_final: horizon.t_max,
            dt: horizon.dt,
            n_traj: 200,
        };
        match self {
            Command::Fig2 => Defaults {
                lambda: 0.5,
                t_final: 50.0,
                ..base
            },
            Command::Fig3a | Command::Sweep => base,
            Command::Fig3b => Defaults { eta_s: 1.0, ..base },
            Command::Robustness => Defaults {
                t_final: 2.0e4,
                ..base
            },
            Command::Colored => Defaults {
                kind: KindName::Ou,
                t_final: 50.0,
                dt: 0.01,
                n_traj: 1000,
                ..base
            },
            Command::Trajectories => Defaults {
                t_final: 20.0,
                dt: 1e-3,
                n_traj: 4000,
                ..base
            },
        }
    }

    fn accepts_trajectories(self) -> bool {
        matches!(self, Command::Fig2 | Command::Colored | Command::Trajectories)
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, extra: &Extra) -> Result<Outcome> {
    if cfg.run.method == Method::Trajectories && !cmd.accepts_trajectories() {
        return Err(ConfigError {
            key: "run.method".into(),
            constraint: format!("`trajectories` is not available for {}", cmd.name()),
        }
        .into());
    }
    match cmd {
        Command::Fig2 => fig2(cfg, extra),
        Command::Fig3a => fig3a(cfg, extra),
        Command::Fig3b => fig3b(cfg, extra),
        Command::Robustness => robustness(cfg),
        Command::Colored => colored(cfg),
        Command::Sweep => sweep(cfg, extra),
        Command::Trajectories => trajectories(cfg),
    }
}

fn setup(cfg: &RunConfig, lam: f64) -> NoonSetup {
    let (s, a) = (&cfg.system, &cfg.ancilla);
    NoonSetup::new(
        s.n_s,
        a.ell,
        lam,
        (cfg.eta_s(), s.gamma_s, s.delta_s),
        (a.n_a, a.eta_a, a.gamma_a, a.delta_a),
    )
}

fn horizon(cfg: &RunConfig) -> Horizon {
    let t_max = cfg.t_final();
    Horizon {
        t_start: Horizon::default().t_start.min(t_max),
        t_max,
        dt: cfg.dt(),
        ..Horizon::default()
    }
}

/// Record stride giving samples roughly every `interval`.
fn stride(dt: f64, interval: f64) -> usize {
    ((interval / dt).round() as usize).max(1)
}

fn positive_list(key: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(ConfigError {
            key: key.into(),
            constraint: "must be a non-empty list of values > 0".into(),
        }
        .into());
    }
    Ok(())
}

fn fig2(cfg: &RunConfig, extra: &Extra) -> Result<Outcome> {
    let s = setup(cfg, cfg.lambda());
    let ac = s.alpha_c();
    let alphas = match (&extra.alphas, cfg.noise.alpha) {
        (Some(a), _) => a.clone(),
        (None, Some(a)) => vec![a],
        (None, None) => vec![ac, 0.75 * ac, 0.0],
    };
    if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
        return Err(ConfigError {
            key: "alphas".into(),
            constraint: "must be a non-empty list of finite values".into(),
        }
        .into());
    }
    let mut table = Table::new();
    let mut curves = Vec::new();
    for &alpha in &alphas {
        let (times, fid) = match cfg.run.method {
            Method::Master => {
                let tr = noon_trace(&s, alpha, cfg.t_final(), cfg.dt())
                    .with_context(|| format!("fidelity trace at alpha = {alpha}"))?;
                (tr.times, tr.fidelity)
            }
            Method::Trajectories => trajectory_fidelity(cfg, &s, alpha)?,
        };
        if table.columns.is_empty() {
            table.push("t", times);
        }
        curves.push(json!({
            "alpha": alpha,
            "min_fidelity": fid.iter().copied().fold(f64::INFINITY, f64::min),
            "final_fidelity": fid.last().copied(),
        }));
        table.push(format!("fidelity_alpha_{alpha}"), fid);
    }
    let plot = Plot::from_table("NOON fidelity", "fidelity", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "fig2".into(),
            table,
            plot,
        }],
        summary: json!({
            "alpha_c": ac,
            "lambda": s.lam,
            "method": cfg.run.method,
            "curves": curves,
        }),
    })
}

fn trajectory_fidelity(cfg: &RunConfig, s: &NoonSetup, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let spin_s = make_spin::<f64>(s.hs.dim())?;
    let spin_a = make_spin::<f64>(s.ha.dim())?;
    let h0 = build_h0(&build_hs(&s.hs)?, &build_ha(&s.ha)?, alpha, spin_s.dim, spin_a.dim)?;
    let jumps = DiagonalJumps::from_operators(&jump_operators(&spin_s, &spin_a))?;
    let psi0 = s.initial_state()?;
    let target = projector_of(&psi0);
    let model = NoiseModel::new(cfg.noise_kind(), build_correlation(s.lam, alpha)?)?;
    let tc = TrajectoryConfig::new(
        cfg.dt(),
        cfg.t_final(),
        cfg.n_traj(),
        cfg.run.seed,
        stride(cfg.dt(), 0.05),
    )?;
    let ens = ensemble_density_range(&tc, &model, &h0, &jumps, &psi0, 0)?;
    let fid = ens
        .rho_avg
        .iter()
        .map(|r| fidelity(r, &target))
        .collect::<decoh_core::Result<Vec<f64>>>()?;
    Ok((ens.times, fid))
}

fn sweep_grid(extra: &Extra, ac: f64) -> Result<Vec<f64>> {
    let (lo, hi) = default_window(ac);
    let lo = extra.alpha_min.unwrap_or(lo);
    let hi = extra.alpha_max.unwrap_or(hi);
    let step = extra.alpha_step.unwrap_or(0.05);
    if !(step > 0.0) || !step.is_finite() {
        return Err(ConfigError {
            key: "alpha-step".into(),
            constraint: "must be > 0".into(),
        }
        .into());
    }
    if !(lo < hi) {
        return Err(ConfigError {
            key: "alpha-min".into(),
            constraint: "must be < alpha-max".into(),
        }
        .into());
    }
    Ok(alpha_grid(ac, step, lo, hi)?)
}

fn sweep_summary(lam: f64, r: &SweepResult) -> serde_json::Value {
    let peak = r.fbar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({
        "lambda": lam,
        "peak_alpha": r.peak_alpha,
        "peak_fbar": peak,
        "fwhm": r.fwhm,
    })
}

fn fig3a(cfg: &RunConfig, extra: &Extra) -> Result<Outcome> {
    let lambdas = extra.lambdas.clone().unwrap_or_else(|| vec![0.05, 0.1, 0.5]);
    positive_list("lambdas", &lambdas)?;
    let base = setup(cfg, lambdas[0]);
    let alphas = sweep_grid(extra, base.alpha_c())?;
    let h = horizon(cfg);
    let mut table = Table::new();
    table.push("alpha", alphas.clone());
    let mut sweeps = Vec::new();
    let mut widths = Vec::new();
    for &lam in &lambdas {
        let s = NoonSetup { lam, ..base };
        let r = alpha_sweep(&s, &alphas, &h).with_context(|| format!("sweep at lambda = {lam}"))?;
        sweeps.push(sweep_summary(lam, &r));
        widths.push(r.fwhm);
        table.push(format!("fbar_lambda_{lam}"), r.fbar);
    }
    let decreasing = widths.windows(2).all(|w| w[1] < w[0]);
    let plot = Plot::from_table("Time-averaged fidelity", "time-averaged fidelity", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "fig3a".into(),
            table,
            plot,
        }],
        summary: json!({
            "alpha_c": base.alpha_c(),
            "n": base.n,
            "horizon": h,
            "sweeps": sweeps,
            "fwhm_strictly_decreasing": decreasing,
        }),
    })
}

fn fig3b(cfg: &RunConfig, extra: &Extra) -> Result<Outcome> {
    let ns = extra.ns.clone().unwrap_or_else(|| vec![1, 3, 5, 7]);
    if ns.is_empty() || ns.contains(&0) {
        return Err(ConfigError {
            key: "ns".into(),
            constraint: "must be a non-empty list of values >= 1".into(),
        }
        .into());
    }
    let lambdas = extra.lambdas.clone().unwrap_or_else(|| vec![0.1]);
    positive_list("lambdas", &lambdas)?;
    let base = setup(cfg, lambdas[0]);
    let ac = base.alpha_c();
    let alphas = sweep_grid(extra, ac)?;
    let k_c = alphas
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - ac).abs().total_cmp(&(b.1 - ac).abs()))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let h = horizon(cfg);
    let mut table = Table::new();
    table.push("alpha", alphas.clone());
    let mut peaks = Table::new();
    peaks.push("n", ns.iter().map(|&n| n as f64).collect());
    let mut per_lambda = Vec::new();
    for &lam in &lambdas {
        let mut peak_fbar = Vec::new();
        let mut residual = Vec::new();
        for &n in &ns {
            let mut s = NoonSetup { lam, ..base }.with_n(n);
            s.ha = SystemParams { n_bosons: n, ..s.ha };
            let r = alpha_sweep(&s, &alphas, &h).with_context(|| format!("sweep at N = {n}, lambda = {lam}"))?;
            peak_fbar.push(r.fbar.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            residual.push(1.0 - r.fbar[k_c]);
            table.push(format!("fbar_n_{n}_lambda_{lam}"), r.fbar);
        }
        let increasing = peak_fbar.windows(2).all(|w| w[1] > w[0]);
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .zip(&residual)
            .filter(|(_, &r)| r > 0.0)
            .map(|(&n, &r)| ((n as f64).ln(), r.ln()))
            .collect();
        let exponent = if pts.len() == ns.len() {
            linear_fit(&pts).ok().map(|(slope, _)| -slope)
        } else {
            None
        };
        per_lambda.push(json!({
            "lambda": lam,
            "peak_fbar": peak_fbar,
            "residual_at_alpha_c": residual,
            "peak_strictly_increasing": increasing,
            "residual_exponent": exponent,
        }));
        peaks.push(format!("peak_fbar_lambda_{lam}"), peak_fbar);
        peaks.push(format!("residual_lambda_{lam}"), residual);
    }
    let plot = Plot::from_table("Time-averaged fidelity versus boson number", "time-averaged fidelity", &table);
    let peak_plot = Plot::from_table("Peak fidelity and residual", "value", &peaks);
    Ok(Outcome {
        artifacts: vec![
            Artifact {
                stem: "fig3b".into(),
                table,
                plot,
            },
            Artifact {
                stem: "fig3b_peaks".into(),
                table: peaks,
                plot: peak_plot,
            },
        ],
        summary: json!({
            "alpha_c": ac,
            "ns": ns,
            "horizon": h,
            "lambdas": per_lambda,
        }),
    })
}

fn sweep(cfg: &RunConfig, extra: &Extra) -> Result<Outcome> {
    let s = setup(cfg, cfg.lambda());
    let alphas = sweep_grid(extra, s.alpha_c())?;
    let h = horizon(cfg);
    let r = alpha_sweep(&s, &alphas, &h)?;
    let summary = json!({
        "alpha_c": s.alpha_c(),
        "n": s.n,
        "horizon": h,
        "sweep": sweep_summary(s.lam, &r),
    });
    let mut table = Table::new();
    table.push("alpha", r.alphas);
    table.push("fbar", r.fbar);
    let plot = Plot::from_table("Coupling sweep", "time-averaged fidelity", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "sweep".into(),
            table,
            plot,
        }],
        summary,
    })
}

/// Largest ancilla weight allowed on the outermost levels.
const EDGE_TOL: f64 = 1e-6;
const MAX_ANCILLA_BOSONS: usize = 64;

/// Smallest ancilla, of the configured parity and at least the configured
/// size, whose spectrum holds the prepared mixture.
fn ancilla_size(cfg: &RunConfig) -> Result<usize> {
    let a = &cfg.ancilla;
    let mut n_a = a.n_a.max(1);
    loop {
        let spin = make_spin::<f64>(n_a + 1)?;
        let (mix, _) = mixed_ancilla_state(&spin, a.ell, a.delta_offset, a.sigma2)?;
        if mix.weights[0].max(mix.weights[n_a]) <= EDGE_TOL {
            return Ok(n_a);
        }
        n_a += 2;
        if n_a > MAX_ANCILLA_BOSONS {
            return Err(ConfigError {
                key: "ancilla.sigma2".into(),
                constraint: format!("mixture does not fit an ancilla of {MAX_ANCILLA_BOSONS} bosons"),
            }
            .into());
        }
    }
}

fn robustness(cfg: &RunConfig) -> Result<Outcome> {
    let a = &cfg.ancilla;
    let mut p = RobustnessParams::new(cfg.lambda(), a.ell, a.delta_offset, a.sigma2, cfg.system.n_s, cfg.t_final());
    p.n_a = ancilla_size(cfg)?;
    let r = robustness_run(&p)?;
    let summary = json!({
        "n_a": p.n_a,
        "gamma_formula": r.gamma_formula,
        "gamma_realized": r.gamma_realized,
        "gamma_fit_composite": r.gamma_fit_composite,
        "gamma_fit_effective": r.gamma_fit_effective,
        "composite_decaying": r.composite_decaying,
        "effective_decaying": r.effective_decaying,
        "relative_error": r.relative_error,
        "tau_inverse_rate": r.tau_inverse_rate,
        "tau_infidelity_scaled": r.tau_infidelity_scaled,
        "epsilon": r.epsilon,
    });
    let mut table = Table::new();
    table.push("t", r.times);
    table.push("coherence_composite", r.coherence_composite);
    table.push("coherence_effective", r.coherence_effective);
    let plot = Plot::from_table("NOON coherence with a mixed ancilla", "|coherence|", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "robustness".into(),
            table,
            plot,
        }],
        summary,
    })
}

fn colored(cfg: &RunConfig) -> Result<Outcome> {
    let p = ColoredParams {
        kind: cfg.noise_kind(),
        setup: setup(cfg, cfg.lambda()),
        dt: cfg.dt(),
        t_final: cfg.t_final(),
        n_traj: cfg.n_traj(),
        seed: cfg.run.seed,
        record_stride: stride(cfg.dt(), 0.1),
    };
    let r = colored_noise_run(&p)?;
    let arm = |a: &decoh_core::experiments::ColoredArm| {
        json!({
            "alpha": a.alpha,
            "condition_residual": a.condition_residual,
            "rate": a.fit.rate,
            "decaying": a.fit.decaying,
            "points_used": a.fit.points_used,
        })
    };
    let summary = json!({
        "kind": r.kind,
        "satisfied": arm(&r.satisfied),
        "violated": arm(&r.violated),
        "rate_ratio": r.rate_ratio,
    });
    let mut table = Table::new();
    table.push("t", r.satisfied.times);
    table.push("coherence_satisfied", r.satisfied.coherence);
    table.push("coherence_violated", r.violated.coherence);
    let plot = Plot::from_table(&format!("NOON coherence under {} noise", r.kind), "|coherence|", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "colored".into(),
            table,
            plot,
        }],
        summary,
    })
}

fn trajectories(cfg: &RunConfig) -> Result<Outcome> {
    let s = &cfg.system;
    let kind: NoiseKind<f64> = cfg.noise_kind();
    let p = StochasticParams {
        kind,
        lam: cfg.lambda(),
        hs: SystemParams::new(cfg.eta_s(), s.gamma_s, s.delta_s, s.n_s),
        dt: cfg.dt(),
        t_final: cfg.t_final(),
        n_traj: cfg.n_traj(),
        seed: cfg.run.seed,
        record_stride: stride(cfg.dt(), 0.5),
    };
    let (ens, cmp) = stochastic_equivalence(&p, 0)?;
    let summary = json!({
        "kind": kind.label(),
        "n_traj": ens.n_traj_used,
        "max_trace_distance": cmp.max_distance,
    });
    let mut table = Table::new();
    table.push("t", cmp.times);
    table.push("trace_distance", cmp.distances);
    let plot = Plot::from_table("Ensemble versus master equation", "trace distance", &table);
    Ok(Outcome {
        artifacts: vec![Artifact {
            stem: "trajectories".into(),
            table,
            plot,
        }],
        summary,
    })
}

//! Quick invariant checks across every library module.

use std::time::Instant;

use anyhow::{ensure, Result};
use decoh_core::experiments::{alpha_grid, alpha_sweep, noon_trace, stochastic_equivalence, Horizon, NoonSetup, StochasticParams};
use decoh_core::lindblad::{assemble_generator, assemble_split_form, composite_generator, dark_state_residual, propagate};
use decoh_core::matrixcore::{inverse, kron, min_eigenvalue, unitarity_defect, unitary_propagator};
use decoh_core::noise::{build_correlation, sample_path, NoiseKind, NoiseModel};
use decoh_core::spinops::{build_h0, build_ha, build_hs, make_spin, SystemParams};
use decoh_core::{CMatrix, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::output::Table;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// The quantity compared against the check's threshold.
    pub value: f64,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(f64, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("matrixcore_unitary_propagator", unitary_check),
    ("matrixcore_inverse", inverse_check),
    ("spinops_commutation", commutation_check),
    ("noise_white_covariance", white_covariance_check),
    ("lindblad_forms_agree", forms_check),
    ("lindblad_dark_state", dark_state_check),
    ("lindblad_positivity", positivity_check),
    ("trajectories_match_master", ensemble_check),
    ("experiments_noon_plateau", plateau_check),
    ("experiments_peak_at_cancellation", peak_check),
    ("cli_csv_round_trip", csv_check),
];

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, value, detail) = match check(&mut rng) {
                Ok((v, d)) => (true, v, d),
                Err(e) => (false, f64::NAN, format!("{e:#}")),
            };
            log::info!("{name} finished in {:.2}s", start.elapsed().as_secs_f64());
            CheckResult {
                name,
                passed,
                value,
                detail,
            }
        })
        .collect()
}

pub fn results_table(results: &[CheckResult]) -> Table {
    let mut t = Table::new();
    t.push("check", (0..results.len()).map(|k| k as f64).collect());
    t.push("passed", results.iter().map(|r| f64::from(u8::from(r.passed))).collect());
    t.push("value", results.iter().map(|r| r.value).collect());
    t
}

fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let a = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    a.hermitian_part()
}

fn random_density(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let r = &g * &g.adjoint();
    let tr = r.trace().re;
    r.scale_real(1.0 / tr)
}

fn unitary_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    for d in [2, 5, 9] {
        let u = unitary_propagator(&random_hermitian(rng, d), 3.7)?;
        worst = worst.max(unitarity_defect(&u));
    }
    ensure!(worst <= 1e-12, "unitarity defect {worst:e} > 1e-12");
    Ok((worst, format!("max unitarity defect {worst:.2e}")))
}

fn inverse_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let a = CMatrix::from_fn(7, 7, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let err = (&inverse(&a)? * &a).max_abs_diff(&CMatrix::identity(7));
    ensure!(err <= 1e-10, "|A^-1 A - I| = {err:e} > 1e-10");
    Ok((err, format!("|A^-1 A - I| = {err:.2e}")))
}

fn commutation_check(_: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    for d in 2..=8 {
        let s = make_spin::<f64>(d)?;
        let lhs = &(&s.jx * &s.jy) - &(&s.jy * &s.jx);
        worst = worst.max(lhs.max_abs_diff(&s.jz.scale(C64::new(0.0, 1.0))));
        let casimir = &(&(&s.jx * &s.jx) + &(&s.jy * &s.jy)) + &(&s.jz * &s.jz);
        let j = s.j;
        worst = worst.max(casimir.max_abs_diff(&CMatrix::identity(d).scale_real(j * (j + 1.0))));
    }
    ensure!(worst <= 1e-12, "commutation defect {worst:e} > 1e-12");
    Ok((worst, format!("max defect {worst:.2e} for d = 2..8")))
}

fn white_covariance_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let (lam, alpha, dt, n) = (0.3, -2.0, 0.01, 40_000);
    let model = NoiseModel::new(NoiseKind::White, build_correlation(lam, alpha)?)?;
    let path = sample_path(&model, dt, n, rng.random())?;
    let cov = |i: usize, j: usize| path.increments.iter().map(|x| x[i] * x[j]).sum::<f64>() / (n as f64 * dt);
    let expected = [[lam, lam, lam * alpha], [lam, lam, lam * alpha], [lam * alpha, lam * alpha, lam * alpha * alpha]];
    let mut worst: f64 = 0.0;
    for (i, row) in expected.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            worst = worst.max((cov(i, j) / want - 1.0).abs());
        }
    }
    ensure!(worst <= 0.05, "relative covariance error {worst} > 0.05");
    Ok((worst, format!("relative covariance error {worst:.3}")))
}

fn forms_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    for d in [2, 3] {
        let s = make_spin::<f64>(d)?;
        let a = make_spin::<f64>(d)?;
        for _ in 0..3 {
            let lam = rng.random_range(0.01..1.0);
            let alpha = rng.random_range(-3.0..3.0);
            let corr = build_correlation(lam, alpha)?;
            let hs = build_hs(&SystemParams::new(0.3, 0.5, -1.0, d - 1))?;
            let ha = build_ha(&SystemParams::new(0.0, 0.2, -1.0, d - 1))?;
            let h0 = build_h0(&hs, &ha, alpha, d, d)?;
            let raw = assemble_generator(&corr, &s, &a, &h0)?;
            let split = assemble_split_form(&corr, &s, &a, &h0)?;
            worst = worst.max(raw.superoperator()?.max_abs_diff(split.superoperator()?));
        }
    }
    ensure!(worst <= 1e-10, "superoperator mismatch {worst:e} > 1e-10");
    Ok((worst, format!("max superoperator difference {worst:.2e}")))
}

fn dark_state_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let d = 4;
    let s = make_spin::<f64>(d)?;
    let a = make_spin::<f64>(d)?;
    let hs = build_hs(&SystemParams::new(0.4, 0.5, -1.0, d - 1))?;
    let ha = build_ha(&SystemParams::new(0.0, 0.0, -1.0, d - 1))?;
    let mut worst: f64 = 0.0;
    for ell in a.jz_diag() {
        let gen = composite_generator(&hs, &ha, &build_correlation(0.2, -1.0 / ell)?, &s, &a)?;
        for _ in 0..3 {
            worst = worst.max(dark_state_residual(&gen, &random_density(rng, d), ell)?);
        }
    }
    ensure!(worst <= 1e-10, "dark-state residual {worst:e} > 1e-10");
    Ok((worst, format!("max dissipative residual {worst:.2e}")))
}

fn positivity_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let d = 3;
    let s = make_spin::<f64>(d)?;
    let a = make_spin::<f64>(d)?;
    let hs = build_hs(&SystemParams::new(0.4, 0.5, -1.0, d - 1))?;
    let ha = build_ha(&SystemParams::new(0.0, 0.3, -1.0, d - 1))?;
    let gen = composite_generator(&hs, &ha, &build_correlation(0.5, 0.7)?, &s, &a)?;
    let rho0 = kron(&random_density(rng, d), &random_density(rng, d));
    let mut worst: f64 = 0.0;
    for rho in propagate(&gen, &rho0, &[0.0, 0.5, 2.0, 10.0])? {
        worst = worst.max((rho.trace().re - 1.0).abs()).max(-min_eigenvalue(&rho)?);
    }
    ensure!(worst <= 1e-10, "trace or positivity defect {worst:e} > 1e-10");
    Ok((worst, format!("max trace or positivity defect {worst:.2e}")))
}

fn ensemble_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let p = StochasticParams {
        kind: NoiseKind::White,
        lam: 0.1,
        hs: SystemParams::new(0.0, 0.5, -1.0, 1),
        dt: 1e-3,
        t_final: 5.0,
        n_traj: 400,
        seed: rng.random(),
        record_stride: 500,
    };
    let (_, a) = stochastic_equivalence(&p, 0)?;
    let (_, b) = stochastic_equivalence(&p, 0)?;
    ensure!(a == b, "repeated ensembles differ");
    let bound = 3.0 / (p.n_traj as f64).sqrt();
    ensure!(a.max_distance <= bound, "trace distance {} > {bound}", a.max_distance);
    Ok((a.max_distance, format!("max trace distance {:.4} with 400 trajectories", a.max_distance)))
}

fn noon_setup(lam: f64) -> NoonSetup {
    NoonSetup::new(1, 0.5, lam, (0.0, 0.5, -1.0), (1, 0.0, 0.0, -1.0))
}

fn plateau_check(_: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let s = noon_setup(0.5);
    let tr = noon_trace(&s, s.alpha_c(), 20.0, 0.05)?;
    let min = tr.fidelity.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(min >= 0.999, "minimum fidelity {min} < 0.999");
    Ok((min, format!("minimum fidelity {min:.8} at alpha_c")))
}

fn peak_check(_: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let s = noon_setup(0.1);
    let ac = s.alpha_c();
    let alphas = alpha_grid(ac, 0.5, ac - 2.0, ac + 2.0)?;
    let h = Horizon {
        t_start: 50.0,
        t_max: 200.0,
        ..Horizon::default()
    };
    let r = alpha_sweep(&s, &alphas, &h)?;
    let off = (r.peak_alpha - ac).abs();
    ensure!(off < 1e-9, "sweep peak at {} instead of {ac}", r.peak_alpha);
    Ok((off, format!("peak at alpha = {}", r.peak_alpha)))
}

fn csv_check(rng: &mut ChaCha8Rng) -> Result<(f64, String)> {
    let mut t = Table::new();
    t.push("a", (0..50).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect());
    t.push("b", (0..50).map(|_| rng.random::<f64>().powi(7)).collect());
    let back = Table::from_csv(&t.to_csv())?;
    ensure!(back == t, "CSV round trip changed values");
    Ok((0.0, "100 values round-trip exactly".into()))
}

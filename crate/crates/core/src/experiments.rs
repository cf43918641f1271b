//! Experiment drivers: NOON fidelity traces, time-averaged fidelity sweeps
//! over the coupling `α`, residual scaling with the boson number, mixed
//! ancilla robustness and colored-noise cancellation.
//!
//! The drivers work in double precision.

use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::linear_fit;
use crate::lindblad::{
    composite_generator, mixed_ancilla_generator, mixed_ancilla_state, propagate, propagate_uniform,
    reduce_system, GkslGenerator,
};
use crate::matrixcore::{kron, partial_trace_ancilla, purity};
use crate::noise::{
    build_correlation, cancellation_residual, GenericNoiseRates, NoiseKind, NoiseModel,
};
use crate::spinops::{build_h0, build_ha, build_hs, make_spin, noon_state, SpinAlgebra, SystemParams};
use crate::trajectories::{
    compare_to_master, ensemble_density_range, run_with_increments, DiagonalJumps, EnsembleResult,
    MasterComparison, TrajectoryConfig,
};
use crate::{CMatrix, C64};

/// Imaginary parts of `Tr[ρ·target]` above this are reported.
const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// `Re Tr[ρ · target]` for a pure-state projector `target`.
pub fn fidelity(rho: &CMatrix, target_pure: &CMatrix) -> Result<f64> {
    let n = rho.require_square()?;
    if target_pure.rows() != n || target_pure.cols() != n {
        return Err(Error::DimensionMismatch {
            op: "fidelity",
            detail: format!("rho is {n}x{n}, target is {}x{}", target_pure.rows(), target_pure.cols()),
        });
    }
    let sq = target_pure * target_pure;
    if !target_pure.is_hermitian(1e-10)
        || (target_pure.trace().re - 1.0).abs() > 1e-10
        || sq.max_abs_diff(target_pure) > 1e-10
    {
        return Err(invalid("target_pure", "must be a rank-one projector"));
    }
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += rho[(i, j)] * target_pure[(j, i)];
        }
    }
    if acc.im.abs() > IMAG_RESIDUE_TOL {
        log::warn!("fidelity has imaginary residue {:e}", acc.im);
    }
    Ok(acc.re)
}

/// `⟨ψ|ρ|ψ⟩` using only the nonzero amplitudes of `ψ`.
fn overlap(rho: &CMatrix, support: &[(usize, C64)]) -> f64 {
    let mut acc = C64::new(0.0, 0.0);
    for &(i, a) in support {
        for &(j, b) in support {
            acc += a.conj() * rho[(i, j)] * b;
        }
    }
    acc.re
}

/// A system of `n` bosons in a double well, coupled to an ancilla prepared
/// in the `Jz` eigenstate `ell`, with dephasing strength `lam`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoonSetup {
    pub n: usize,
    pub ell: f64,
    pub lam: f64,
    pub hs: SystemParams<f64>,
    pub ha: SystemParams<f64>,
}

impl NoonSetup {
    /// Double-well setup with the system parameters `(η, γ, Δ)` and a bare
    /// ancilla `(0, γ_A, Δ_A)` holding `n_a` bosons.
    pub fn new(n: usize, ell: f64, lam: f64, system: (f64, f64, f64), ancilla: (usize, f64, f64, f64)) -> Self {
        let (n_a, eta_a, gamma_a, delta_a) = ancilla;
        Self {
            n,
            ell,
            lam,
            hs: SystemParams::new(system.0, system.1, system.2, n),
            ha: SystemParams::new(eta_a, gamma_a, delta_a, n_a),
        }
    }

    /// Same setup with `n` system bosons.
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self.hs.n_bosons = n;
        self
    }

    /// `−1/ℓ`.
    pub fn alpha_c(&self) -> f64 {
        -1.0 / self.ell
    }

    pub fn validate(&self) -> Result<()> {
        if self.n != self.hs.n_bosons {
            return Err(invalid("n", "must equal the system boson number"));
        }
        self.hs.validate()?;
        self.ha.validate()?;
        if !(self.lam >= 0.0) || !self.lam.is_finite() {
            return Err(invalid("lam", "must be non-negative and finite"));
        }
        if self.ell == 0.0 || !self.ell.is_finite() {
            return Err(invalid("ell", "must be nonzero and finite"));
        }
        let spin_a = make_spin::<f64>(self.ha.dim())?;
        spin_a
            .index_of(self.ell)
            .ok_or_else(|| invalid("ell", format!("{} is not an ancilla Jz eigenvalue", self.ell)))?;
        Ok(())
    }

    fn spins(&self) -> Result<(SpinAlgebra<f64>, SpinAlgebra<f64>)> {
        Ok((make_spin(self.hs.dim())?, make_spin(self.ha.dim())?))
    }

    /// Composite generator at coupling `alpha`. With `lam = 0` it is the
    /// closed evolution under `H₀`.
    pub fn generator(&self, alpha: f64) -> Result<GkslGenerator<f64>> {
        self.validate()?;
        let (s, a) = self.spins()?;
        let hs = build_hs(&self.hs)?;
        let ha = build_ha(&self.ha)?;
        if self.lam == 0.0 {
            return GkslGenerator::new(build_h0(&hs, &ha, alpha, s.dim, a.dim)?);
        }
        composite_generator(&hs, &ha, &build_correlation(self.lam, alpha)?, &s, &a)
    }

    /// `|NOON⟩ ⊗ |ℓ⟩` as a dense vector.
    pub fn initial_state(&self) -> Result<Vec<C64>> {
        let (_, a) = self.spins()?;
        let k = a
            .index_of(self.ell)
            .ok_or_else(|| invalid("ell", "is not an ancilla Jz eigenvalue"))?;
        let mut anc = vec![C64::new(0.0, 0.0); a.dim];
        anc[k] = C64::new(1.0, 0.0);
        Ok(kron(&noon_state(self.n, 1)?, &CMatrix::column(&anc)).into_entries())
    }

    fn support(&self) -> Result<Vec<(usize, C64)>> {
        Ok(self
            .initial_state()?
            .into_iter()
            .enumerate()
            .filter(|(_, z)| *z != C64::new(0.0, 0.0))
            .collect())
    }

    fn initial_density(&self) -> Result<CMatrix> {
        let psi = CMatrix::column(&self.initial_state()?);
        Ok(&psi * &psi.adjoint())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub setup: NoonSetup,
    pub alpha: f64,
    pub t_final: f64,
    pub dt: f64,
}

/// Fidelity with `ρ_NOON ⊗ Pℓ` and reduced-system purity over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityTrace {
    pub times: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub purity: Vec<f64>,
    pub params: TraceParams,
}

fn steps_for(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid("dt", "must be positive and finite"));
    }
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(invalid("t_final", "must be non-negative and finite"));
    }
    Ok((t_final / dt).round() as usize)
}

/// Propagates `ρ_NOON ⊗ Pℓ` under the composite generator and records the
/// fidelity and the purity of the reduced system state.
pub fn noon_trace(setup: &NoonSetup, alpha: f64, t_final: f64, dt: f64) -> Result<FidelityTrace> {
    let n_steps = steps_for(t_final, dt)?;
    let gen = setup.generator(alpha)?;
    let support = setup.support()?;
    let (d_s, d_a) = (setup.hs.dim(), setup.ha.dim());
    let mut tr = FidelityTrace {
        times: Vec::with_capacity(n_steps + 1),
        fidelity: Vec::with_capacity(n_steps + 1),
        purity: Vec::with_capacity(n_steps + 1),
        params: TraceParams {
            setup: *setup,
            alpha,
            t_final,
            dt,
        },
    };
    propagate_uniform(&gen, &setup.initial_density()?, dt, n_steps, |k, rho| {
        tr.times.push(k as f64 * dt);
        tr.fidelity.push(overlap(rho, &support));
        tr.purity.push(purity(&partial_trace_ancilla(rho, d_s, d_a)?)?);
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(tr)
}

/// Trapezoidal average of the fidelity over the trace's time span.
pub fn time_averaged_fidelity(trace: &FidelityTrace) -> Result<f64> {
    trapezoid_mean(&trace.times, &trace.fidelity)
}

fn trapezoid_mean(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() || times.is_empty() {
        return Err(invalid("trace", "needs matching, non-empty times and values"));
    }
    if times.len() == 1 {
        return Ok(values[0]);
    }
    let span = times[times.len() - 1] - times[0];
    if !(span > 0.0) {
        return Err(invalid("trace", "must cover a positive time span"));
    }
    let integral: f64 = times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    Ok(integral / span)
}

/// Horizon doubling rule for long-time averages: start at `t_start`, double
/// until successive averages differ by less than `tol`, stop at `t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub t_start: f64,
    pub t_max: f64,
    pub tol: f64,
    pub dt: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            t_start: 100.0,
            t_max: 800.0,
            tol: 1e-3,
            dt: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedFidelity {
    pub fbar: f64,
    pub horizon: f64,
    pub converged: bool,
}

/// Long-time average of the NOON fidelity at coupling `alpha`.
pub fn averaged_fidelity(setup: &NoonSetup, alpha: f64, h: &Horizon) -> Result<AveragedFidelity> {
    if !(h.t_start > 0.0) || h.t_max < h.t_start || !(h.tol > 0.0) {
        return Err(invalid("horizon", "needs 0 < t_start <= t_max and tol > 0"));
    }
    let n_max = steps_for(h.t_max, h.dt)?;
    let gen = setup.generator(alpha)?;
    let support = setup.support()?;
    let mut checkpoint = steps_for(h.t_start, h.dt)?.max(1);
    let mut integral = 0.0;
    let mut prev_f = 0.0;
    let mut prev_avg: Option<f64> = None;
    let mut result: Option<AveragedFidelity> = None;
    propagate_uniform(&gen, &setup.initial_density()?, h.dt, n_max, |k, rho| {
        let f = overlap(rho, &support);
        if k > 0 {
            integral += 0.5 * h.dt * (prev_f + f);
        }
        prev_f = f;
        if k == checkpoint || k == n_max {
            let t = k as f64 * h.dt;
            let avg = integral / t;
            let converged = prev_avg.is_some_and(|p| (avg - p).abs() < h.tol);
            if converged || k == n_max {
                result = Some(AveragedFidelity {
                    fbar: avg,
                    horizon: t,
                    converged,
                });
                return Ok(ControlFlow::Break(()));
            }
            prev_avg = Some(avg);
            checkpoint *= 2;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    let r = result.ok_or_else(|| Error::InvalidState("time average produced no checkpoint".into()))?;
    if !r.converged {
        log::debug!("time average at alpha = {alpha} not converged by t = {}", r.horizon);
    }
    Ok(r)
}

/// `α_c + k·step` for every integer `k` with the value inside `[lo, hi]`.
pub fn alpha_grid(alpha_c: f64, step: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(lo < hi) {
        return Err(invalid("alpha grid", "needs step > 0 and lo < hi"));
    }
    let k_lo = ((lo - alpha_c) / step - 1e-9).ceil() as i64;
    let k_hi = ((hi - alpha_c) / step + 1e-9).floor() as i64;
    Ok((k_lo..=k_hi).map(|k| alpha_c + k as f64 * step).collect())
}

/// Default sweep window `[−6, 2α_c]` for `α_c > 0`, mirrored to
/// `[2α_c, 6]` for `α_c < 0`.
pub fn default_window(alpha_c: f64) -> (f64, f64) {
    if alpha_c >= 0.0 {
        (-6.0, 2.0 * alpha_c)
    } else {
        (2.0 * alpha_c, 6.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub fbar: Vec<f64>,
    pub peak_alpha: f64,
    pub fwhm: f64,
}

/// Time-averaged fidelity for each `α`; peak by grid argmax and full width
/// at half maximum above the sweep minimum.
pub fn alpha_sweep(setup: &NoonSetup, alphas: &[f64], h: &Horizon) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(invalid("alphas", "must not be empty"));
    }
    let ac = setup.alpha_c();
    let spacing = alphas
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(f64::INFINITY, f64::min);
    let nearest = alphas.iter().map(|a| (a - ac).abs()).fold(f64::INFINITY, f64::min);
    if alphas.len() > 1 && nearest > spacing {
        log::warn!("alpha grid does not resolve the cancellation point {ac}");
    }
    let fbar = alphas
        .par_iter()
        .map(|&a| averaged_fidelity(setup, a, h).map(|r| r.fbar))
        .collect::<Result<Vec<f64>>>()?;
    let (peak_idx, fwhm) = peak_and_width(alphas, &fbar);
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        peak_alpha: alphas[peak_idx],
        fbar,
        fwhm,
    })
}

/// Grid argmax and the width between the half-maximum crossings on either
/// side, measured from the minimum. A side without a crossing gives NaN.
pub fn peak_and_width(xs: &[f64], ys: &[f64]) -> (usize, f64) {
    let peak = ys
        .iter()
        .enumerate()
        .fold(0, |best, (k, &y)| if y > ys[best] { k } else { best });
    let base = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let half = base + 0.5 * (ys[peak] - base);
    let cross = |a: usize, b: usize| xs[a] + (half - ys[a]) * (xs[b] - xs[a]) / (ys[b] - ys[a]);
    let left = (1..=peak).rev().find(|&k| ys[k - 1] < half).map(|k| cross(k - 1, k));
    let right = (peak..ys.len() - 1).find(|&k| ys[k + 1] < half).map(|k| cross(k, k + 1));
    match (left, right) {
        (Some(l), Some(r)) => (peak, (r - l).abs()),
        _ => {
            log::warn!("half maximum not crossed on both sides of the peak");
            (peak, f64::NAN)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ScalingFit {
    /// `1 − F̄ ≈ c / N^p`.
    Fitted { p: f64, c: f64 },
    /// Every residual is below the cancellation threshold.
    AlreadyCancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualScaling {
    pub ns: Vec<usize>,
    pub fbar: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fit: ScalingFit,
}

/// Residuals below this count as fully cancelled.
pub const CANCELLED_TOL: f64 = 1e-9;

/// `1 − F̄(α_c, N)` for each `N` and a power-law fit in `N`.
pub fn residual_scaling(setup: &NoonSetup, ns: &[usize], h: &Horizon) -> Result<ResidualScaling> {
    if ns.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least two boson numbers, got {}",
            ns.len()
        )));
    }
    let fbar = ns
        .par_iter()
        .map(|&n| {
            let s = setup.with_n(n);
            averaged_fidelity(&s, s.alpha_c(), h).map(|r| r.fbar)
        })
        .collect::<Result<Vec<f64>>>()?;
    let residuals: Vec<f64> = fbar.iter().map(|f| 1.0 - f).collect();
    let fit = if residuals.iter().all(|r| r.abs() <= CANCELLED_TOL) {
        ScalingFit::AlreadyCancelled
    } else {
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .zip(&residuals)
            .map(|(&n, &r)| {
                if r > 0.0 {
                    Ok(((n as f64).ln(), r.ln()))
                } else {
                    Err(Error::DegenerateFit(format!("residual {r} at N = {n} is not positive")))
                }
            })
            .collect::<Result<_>>()?;
        let (slope, icpt) = linear_fit(&pts)?;
        ScalingFit::Fitted {
            p: -slope,
            c: icpt.exp(),
        }
    };
    Ok(ResidualScaling {
        ns: ns.to_vec(),
        fbar,
        residuals,
        fit,
    })
}

/// Exponential decay fit of a positive signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub points_used: usize,
    /// False when the fitted slope is not negative; `rate` is then 0.
    pub decaying: bool,
}

/// Least squares on `ln y` over the points with `y > floor`.
pub fn fit_decay(times: &[f64], values: &[f64], floor: f64) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > floor)
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    let (slope, _) = linear_fit(&pts)?;
    Ok(if slope < 0.0 {
        DecayFit {
            rate: -slope,
            points_used: pts.len(),
            decaying: true,
        }
    } else {
        DecayFit {
            rate: 0.0,
            points_used: pts.len(),
            decaying: false,
        }
    })
}

/// `|ρ_S[0, N]|`, the NOON coherence of a reduced system state.
fn noon_coherence(rho_s: &CMatrix) -> f64 {
    rho_s[(0, rho_s.rows() - 1)].norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessParams {
    pub lam: f64,
    pub ell: f64,
    pub delta: f64,
    pub sigma2: f64,
    pub n: usize,
    /// Bosons in the ancilla well pair; its spectrum must hold the mixture.
    pub n_a: usize,
    pub t_final: f64,
    pub n_points: usize,
    pub hs: SystemParams<f64>,
}

impl RobustnessParams {
    /// Static system (`γ = η = 0`, `Δ = −1`) so that only dephasing changes
    /// the coherence magnitude.
    pub fn new(lam: f64, ell: f64, delta: f64, sigma2: f64, n: usize, t_final: f64) -> Self {
        Self {
            lam,
            ell,
            delta,
            sigma2,
            n,
            n_a: 3,
            t_final,
            n_points: 41,
            hs: SystemParams::new(0.0, 0.0, -1.0, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// `λ(δ² + σ²)/ℓ²`.
    pub gamma_formula: f64,
    /// Rate the discretized ancilla mixture produces at leading order.
    pub gamma_realized: f64,
    /// Fitted rate of the full system–ancilla propagation.
    pub gamma_fit_composite: f64,
    /// Fitted rate of the effective single-system generator.
    pub gamma_fit_effective: f64,
    pub composite_decaying: bool,
    pub effective_decaying: bool,
    /// `|composite − effective| / effective`.
    pub relative_error: f64,
    /// `1/Γ_res`.
    pub tau_inverse_rate: f64,
    /// `1/(ε Γ_res)` with the preparation infidelity `ε = 2σ²`.
    pub tau_infidelity_scaled: f64,
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub coherence_composite: Vec<f64>,
    pub coherence_effective: Vec<f64>,
}

/// Largest ancilla weight allowed on the outermost levels.
const TRUNCATION_TOL: f64 = 1e-6;

/// Residual dephasing of the NOON coherence with a mixed ancilla, computed
/// by full composite propagation and by the effective system generator.
/// Coherence decay under `Γ 𝕄[Jz]` has rate `Γ N²/2`; both fitted rates are
/// converted back to `Γ`.
pub fn robustness_run(p: &RobustnessParams) -> Result<RobustnessReport> {
    if !(p.lam > 0.0) {
        return Err(invalid("lam", "must be > 0"));
    }
    if p.n_points < 2 || !(p.t_final > 0.0) {
        return Err(invalid("t_final", "needs t_final > 0 and at least two points"));
    }
    let d_s = p.n + 1;
    let d_a = p.n_a + 1;
    let spin_s = make_spin::<f64>(d_s)?;
    let spin_a = make_spin::<f64>(d_a)?;
    let (mix, rho_a) = mixed_ancilla_state(&spin_a, p.ell, p.delta, p.sigma2)?;
    let edge = mix.weights[0].max(mix.weights[d_a - 1]);
    if edge > TRUNCATION_TOL {
        return Err(invalid(
            "n_a",
            format!("ancilla spectrum truncates the mixture (edge weight {edge:e})"),
        ));
    }
    let alpha = -1.0 / p.ell;
    let hs = build_hs(&p.hs)?;
    let ha = build_ha(&SystemParams::new(0.0, 0.0, -1.0, p.n_a))?;
    let noon = noon_state::<f64>(p.n, 1)?;
    let rho_noon = &noon * &noon.adjoint();
    let times: Vec<f64> = (0..p.n_points)
        .map(|k| p.t_final * k as f64 / (p.n_points - 1) as f64)
        .collect();

    let composite = composite_generator(&hs, &ha, &build_correlation(p.lam, alpha)?, &spin_s, &spin_a)?;
    let coherence_composite: Vec<f64> = propagate(&composite, &kron(&rho_noon, &rho_a), &times)?
        .iter()
        .map(|r| partial_trace_ancilla(r, d_s, d_a).map(|s| noon_coherence(&s)))
        .collect::<Result<_>>()?;
    let effective = mixed_ancilla_generator(p.lam, p.ell, p.delta, p.sigma2, &hs)?;
    let coherence_effective: Vec<f64> = propagate(&effective, &rho_noon, &times)?
        .iter()
        .map(noon_coherence)
        .collect();

    let scale = 2.0 / (p.n * p.n) as f64;
    let fa = fit_decay(&times, &coherence_composite, 1e-3)?;
    let fb = fit_decay(&times, &coherence_effective, 1e-3)?;
    let gamma_formula = mix.gamma_res(p.lam)?;
    let (ga, gb) = (fa.rate * scale, fb.rate * scale);
    let relative_error = if gb > 0.0 {
        (ga - gb).abs() / gb
    } else if ga == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let epsilon = 2.0 * p.sigma2;
    Ok(RobustnessReport {
        gamma_formula,
        gamma_realized: mix.realized_rate(p.lam),
        gamma_fit_composite: ga,
        gamma_fit_effective: gb,
        composite_decaying: fa.decaying,
        effective_decaying: fb.decaying,
        relative_error,
        tau_inverse_rate: 1.0 / gamma_formula,
        tau_infidelity_scaled: 1.0 / (epsilon * gamma_formula),
        epsilon,
        times,
        coherence_composite,
        coherence_effective,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredParams {
    pub kind: NoiseKind<f64>,
    pub setup: NoonSetup,
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub record_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredArm {
    pub alpha: f64,
    /// `λ_S + 2ℓλ_{S,SA} + ℓ²λ_{SA,SA}` for the arm's rates.
    pub condition_residual: f64,
    pub fit: DecayFit,
    pub times: Vec<f64>,
    pub coherence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredReport {
    pub kind: String,
    pub satisfied: ColoredArm,
    pub violated: ColoredArm,
    /// Satisfied over violated decay rate.
    pub rate_ratio: f64,
}

/// Ensemble NOON coherence decay with the cancellation condition satisfied
/// (`α = −1/ℓ`) and violated (`α = 0`).
pub fn colored_noise_run(p: &ColoredParams) -> Result<ColoredReport> {
    p.kind.validate()?;
    p.setup.validate()?;
    let s = &p.setup;
    let arm = |alpha: f64, first: u64| -> Result<ColoredArm> {
        let (spin_s, spin_a) = s.spins()?;
        let hs = build_hs(&s.hs)?;
        let ha = build_ha(&s.ha)?;
        let h0 = build_h0(&hs, &ha, alpha, spin_s.dim, spin_a.dim)?;
        let jumps = DiagonalJumps::from_operators(&crate::lindblad::jump_operators(&spin_s, &spin_a))?;
        let psi0 = s.initial_state()?;
        let (ens, residual) = if s.lam == 0.0 {
            let cfg = TrajectoryConfig::new(p.dt, p.t_final, 1, p.seed, p.record_stride)?;
            let path = run_with_increments(&cfg, &h0, &jumps, &psi0, || [0.0; 3])?;
            let rho_avg = path
                .iter()
                .map(|psi| {
                    let c = CMatrix::column(psi);
                    &c * &c.adjoint()
                })
                .collect();
            (
                EnsembleResult {
                    times: cfg.record_times(),
                    rho_avg,
                    n_traj_used: 1,
                },
                0.0,
            )
        } else {
            let cfg = TrajectoryConfig::new(p.dt, p.t_final, p.n_traj, p.seed, p.record_stride)?;
            let model = NoiseModel::new(p.kind, build_correlation(s.lam, alpha)?)?;
            let rates = GenericNoiseRates::from_lambda_alpha(s.lam, alpha, p.kind)?;
            (
                ensemble_density_range(&cfg, &model, &h0, &jumps, &psi0, first)?,
                cancellation_residual(&rates, s.ell),
            )
        };
        let red = ens.reduced(spin_s.dim, spin_a.dim)?;
        let coherence: Vec<f64> = red.rho_avg.iter().map(noon_coherence).collect();
        // The ensemble noise floor on the coherence is about 1/√n_traj.
        let floor = if s.lam == 0.0 {
            1e-3
        } else {
            1e-3f64.max(2.0 / (ens.n_traj_used as f64).sqrt())
        };
        let fit = fit_decay(&red.times, &coherence, floor)?;
        Ok(ColoredArm {
            alpha,
            condition_residual: residual,
            fit,
            times: red.times,
            coherence,
        })
    };
    let satisfied = arm(s.alpha_c(), 0)?;
    let violated = arm(0.0, p.n_traj as u64)?;
    let rate_ratio = if violated.fit.rate > 0.0 {
        satisfied.fit.rate / violated.fit.rate
    } else if satisfied.fit.rate == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ColoredReport {
        kind: p.kind.label().to_string(),
        satisfied,
        violated,
        rate_ratio,
    })
}

/// Single-system trajectory study against the white-noise master equation
/// `−i[H_S,·] + λ𝕄[Jz]`. Colored `kind`s show the non-Markovian departure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticParams {
    pub kind: NoiseKind<f64>,
    pub lam: f64,
    pub hs: SystemParams<f64>,
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub record_stride: usize,
}

/// Hamiltonian, jump diagonals, initial NOON state and master generator.
type SingleSystem = (CMatrix, DiagonalJumps<f64>, Vec<C64>, GkslGenerator<f64>);

fn single_system(p: &StochasticParams) -> Result<SingleSystem> {
    let hs = build_hs(&p.hs)?;
    let s = make_spin::<f64>(p.hs.dim())?;
    let z = CMatrix::zeros(s.dim, s.dim);
    let jumps = DiagonalJumps::from_operators(&[s.jz.clone(), z.clone(), z])?;
    let psi0 = noon_state::<f64>(p.hs.n_bosons, 1)?.into_entries();
    let gen = reduce_system(p.lam, &hs)?;
    Ok((hs, jumps, psi0, gen))
}

/// Ensemble of `n_traj` trajectories starting at trajectory index `first`,
/// compared with the master equation on the recorded grid.
pub fn stochastic_equivalence(p: &StochasticParams, first: u64) -> Result<(EnsembleResult<f64>, MasterComparison<f64>)> {
    let (hs, jumps, psi0, gen) = single_system(p)?;
    let cfg = TrajectoryConfig::new(p.dt, p.t_final, p.n_traj, p.seed, p.record_stride)?;
    let model = NoiseModel::new(p.kind, build_correlation(p.lam, 0.0)?)?;
    let ens = ensemble_density_range(&cfg, &model, &hs, &jumps, &psi0, first)?;
    let cmp = compare_to_master(&ens, &gen)?;
    Ok((ens, cmp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    /// Mean over disjoint batches of the largest trace distance to the
    /// master solution.
    pub mean_errors: Vec<f64>,
    pub batches: Vec<usize>,
    /// `p` in `error ∝ n_traj^{−p}`.
    pub exponent: f64,
}

/// Error versus ensemble size from one pool of `base · multiples.last()`
/// trajectories split into disjoint batches. Larger ensembles are formed by
/// averaging consecutive base batches, so every size reuses the same pool.
pub fn convergence_study(p: &StochasticParams, base: usize, multiples: &[usize], pool_batches: usize) -> Result<ConvergenceReport> {
    if multiples.len() < 2 || multiples.iter().any(|&m| m == 0 || !pool_batches.is_multiple_of(m)) {
        return Err(invalid("multiples", "need two or more divisors of the pool batch count"));
    }
    let (_, _, _, gen) = single_system(p)?;
    let base_params = StochasticParams {
        n_traj: base,
        ..*p
    };
    let batches: Vec<EnsembleResult<f64>> = (0..pool_batches)
        .map(|b| stochastic_equivalence(&base_params, (b * base) as u64).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let mut sizes = Vec::new();
    let mut mean_errors = Vec::new();
    let mut counts = Vec::new();
    for &m in multiples {
        let mut errs = Vec::new();
        for group in batches.chunks(m) {
            let mut rho_avg = group[0].rho_avg.clone();
            for g in &group[1..] {
                for (a, b) in rho_avg.iter_mut().zip(&g.rho_avg) {
                    *a += b;
                }
            }
            let inv = 1.0 / m as f64;
            let merged = EnsembleResult {
                times: group[0].times.clone(),
                rho_avg: rho_avg.into_iter().map(|r| r.scale_real(inv)).collect(),
                n_traj_used: base * m,
            };
            errs.push(compare_to_master(&merged, &gen)?.max_distance);
        }
        sizes.push(base * m);
        counts.push(errs.len());
        mean_errors.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    let pts: Vec<(f64, f64)> = sizes
        .iter()
        .zip(&mean_errors)
        .map(|(&n, &e)| ((n as f64).ln(), e.ln()))
        .collect();
    let (slope, _) = linear_fit(&pts)?;
    Ok(ConvergenceReport {
        sizes,
        mean_errors,
        batches: counts,
        exponent: -slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig2(lam: f64) -> NoonSetup {
        NoonSetup::new(1, 0.5, lam, (0.0, 0.5, -1.0), (1, 0.0, 0.0, -1.0))
    }

    #[test]
    fn fidelity_trivial_cases() {
        let p = CMatrix::from_real(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = CMatrix::from_real(2, 2, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let mixed = CMatrix::identity(2).scale_real(0.5);
        assert_eq!(fidelity(&p, &p).unwrap(), 1.0);
        assert_eq!(fidelity(&q, &p).unwrap(), 0.0);
        let plus = CMatrix::from_real(2, 2, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((fidelity(&mixed, &plus).unwrap() - 0.5).abs() < 1e-15);
        assert!(fidelity(&p, &mixed).is_err());
        assert!(fidelity(&CMatrix::identity(3), &p).is_err());
    }

    #[test]
    fn dark_trace_plateau() {
        let tr = noon_trace(&fig2(0.5), -2.0, 50.0, 0.05).unwrap();
        assert!(tr.fidelity.iter().all(|f| (0.999..=1.0 + 1e-9).contains(f)));
        let p0 = tr.purity[0];
        assert!(tr.purity.iter().all(|&p| (p - p0).abs() <= 1e-8));
    }

    #[test]
    fn uncoupled_trace_relaxes() {
        let tr = noon_trace(&fig2(0.5), 0.0, 40.0, 0.05).unwrap();
        let last = *tr.fidelity.last().unwrap();
        assert!((last - 0.5).abs() < 0.05, "{last}");
        for (&f, &p) in tr.fidelity.iter().zip(&tr.purity) {
            assert!((-1e-12..=1.0 + 1e-9).contains(&f));
            assert!((0.5 - 1e-12..=1.0 + 1e-9).contains(&p));
        }
    }

    #[test]
    fn closed_evolution_keeps_purity() {
        let tr = noon_trace(&fig2(0.0), 0.7, 10.0, 0.1).unwrap();
        assert!(tr.purity.iter().all(|&p| (p - 1.0).abs() < 1e-9));
    }

    #[test]
    fn pure_dephasing_average_matches_closed_form() {
        let lam = 0.2;
        let s = NoonSetup::new(1, 0.5, lam, (0.0, 0.0, 0.0), (1, 0.0, 0.0, 0.0));
        let t = 100.0;
        let tr = noon_trace(&s, 0.0, t, 0.05).unwrap();
        let fbar = time_averaged_fidelity(&tr).unwrap();
        let exact = 0.5 + (1.0 - (-lam * t / 2.0).exp()) / (lam * t);
        assert!((fbar - exact).abs() / exact < 0.02, "{fbar} vs {exact}");
    }

    #[test]
    fn constant_average() {
        let tr = FidelityTrace {
            times: vec![0.0, 1.0, 3.0],
            fidelity: vec![0.7; 3],
            purity: vec![1.0; 3],
            params: TraceParams {
                setup: fig2(0.1),
                alpha: 0.0,
                t_final: 3.0,
                dt: 1.0,
            },
        };
        assert!((time_averaged_fidelity(&tr).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cancellation_average_is_one() {
        let r = averaged_fidelity(&fig2(0.5), -2.0, &Horizon::default()).unwrap();
        assert!(r.fbar >= 0.999 && r.converged);
    }

    #[test]
    fn grid_contains_cancellation_point() {
        let g = alpha_grid(2.0, 0.05, -6.0, 4.0).unwrap();
        assert_eq!(g.len(), 201);
        assert!(g.contains(&2.0));
        assert_eq!(default_window(-2.0), (-4.0, 6.0));
    }

    #[test]
    fn width_of_triangle() {
        let xs: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 5.0 - (x - 5.0f64).abs()).collect();
        let (p, w) = peak_and_width(&xs, &ys);
        assert_eq!(p, 5);
        assert!((w - 5.0).abs() < 1e-12);
        let scaled: Vec<f64> = ys.iter().map(|y| 3.0 * y).collect();
        assert_eq!(peak_and_width(&xs, &scaled).0, p);
    }

    #[test]
    fn sweep_peaks_at_cancellation() {
        let s = NoonSetup::new(1, -0.5, 0.1, (0.0, 0.5, -1.0), (1, 0.0, 0.0, -1.0));
        let alphas = alpha_grid(2.0, 0.25, -2.0, 4.0).unwrap();
        let h = Horizon {
            t_max: 200.0,
            ..Horizon::default()
        };
        let r = alpha_sweep(&s, &alphas, &h).unwrap();
        assert!((r.peak_alpha - 2.0).abs() <= 0.25);
        assert!(r.fbar.iter().all(|f| (0.0..=1.0 + 1e-9).contains(f)));
    }

    #[test]
    fn scaling_needs_two_sizes_and_detects_cancellation() {
        let h = Horizon {
            t_max: 200.0,
            ..Horizon::default()
        };
        assert!(matches!(
            residual_scaling(&fig2(0.1), &[3], &h),
            Err(Error::DegenerateFit(_))
        ));
        // Heff = −γJx commutes with nothing that would move the N = 1
        // NOON state, but for N = 3 it does; a static system keeps both.
        let still = NoonSetup::new(1, 0.5, 0.1, (0.0, 0.0, -1.0), (1, 0.0, 0.0, -1.0));
        let r = residual_scaling(&still, &[1, 3], &h).unwrap();
        assert_eq!(r.fit, ScalingFit::AlreadyCancelled);
    }

    #[test]
    fn robustness_without_offset_does_not_decay() {
        let r = robustness_run(&RobustnessParams::new(0.1, 0.5, 0.0, 0.0, 1, 1000.0)).unwrap();
        assert!(r.gamma_fit_composite <= 1e-6 && r.gamma_fit_effective <= 1e-6);
        assert_eq!(r.gamma_formula, 0.0);
    }

    #[test]
    fn robustness_effective_route_recovers_formula() {
        let r = robustness_run(&RobustnessParams::new(0.1, 0.5, 0.05, 0.0, 1, 2000.0)).unwrap();
        assert!((r.gamma_fit_effective - r.gamma_formula).abs() / r.gamma_formula < 1e-6);
    }

    #[test]
    fn colored_without_noise_has_no_decay() {
        let p = ColoredParams {
            kind: NoiseKind::Ou { tau_c: 5.0 },
            setup: NoonSetup::new(1, 0.5, 0.0, (0.0, 0.0, -1.0), (1, 0.0, 0.0, -1.0)),
            dt: 0.01,
            t_final: 5.0,
            n_traj: 10,
            seed: 1,
            record_stride: 50,
        };
        let r = colored_noise_run(&p).unwrap();
        assert!(r.satisfied.fit.rate < 1e-12 && r.violated.fit.rate < 1e-12);
    }

    #[test]
    fn white_ensemble_tracks_master_small() {
        let p = StochasticParams {
            kind: NoiseKind::White,
            lam: 0.1,
            hs: SystemParams::new(0.0, 0.5, -1.0, 1),
            dt: 1e-3,
            t_final: 5.0,
            n_traj: 400,
            seed: 3,
            record_stride: 500,
        };
        let (_, cmp) = stochastic_equivalence(&p, 0).unwrap();
        assert!(cmp.max_distance <= 3.0 / 20.0 + 10.0 * p.dt, "{}", cmp.max_distance);
    }
}

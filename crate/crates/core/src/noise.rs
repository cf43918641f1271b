//! Correlated classical noise on the three dephasing channels
//! `(w_S, w_A, w_SA)`.
//!
//! Every sampler reduces the 3x3 correlation matrix to a set of loading
//! vectors `l_k` with `Λ = Σ l_k l_kᵀ` and drives each loading with an
//! independent unit scalar process. What the samplers emit is the integral
//! of the noise over each time step, since that is what enters an exact
//! dephasing phase.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrixcore::{eigh, ComplexDense};
use crate::scalar::Scalar;

/// Relative eigenvalue threshold below which a correlation mode is dropped.
const RANK_TOL: f64 = 1e-12;

/// The 3x3 correlation matrix `Λ` of the channels `(w_S, w_A, w_SA)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix<T> {
    pub lam: T,
    pub alpha: T,
    pub m: [[T; 3]; 3],
    /// True when `m` is exactly `lam · v vᵀ` with `v = (1, 1, alpha)`.
    rank_one: bool,
}

/// `λ · v vᵀ` with `v = (1, 1, α)`.
pub fn build_correlation<T: Scalar>(lam: T, alpha: T) -> Result<CorrelationMatrix<T>> {
    if !(lam > T::zero()) || !lam.is_finite() {
        return Err(invalid("lam", format!("must be positive and finite, got {lam}")));
    }
    if !alpha.is_finite() {
        return Err(invalid("alpha", "must be finite"));
    }
    let v = [T::one(), T::one(), alpha];
    let mut m = [[T::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = lam * v[i] * v[j];
        }
    }
    Ok(CorrelationMatrix {
        lam,
        alpha,
        m,
        rank_one: true,
    })
}

impl<T: Scalar> CorrelationMatrix<T> {
    /// Arbitrary symmetric positive semi-definite correlations. `lam` and
    /// `alpha` are set to `m[0][0]` and `m[0][2]/m[0][0]` for reporting only.
    pub fn custom(m: [[T; 3]; 3]) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                if !m[i][j].is_finite() {
                    return Err(invalid("m", "entries must be finite"));
                }
                if (m[i][j] - m[j][i]).abs() > T::tol(1e-12) * (T::one() + m[i][j].abs()) {
                    return Err(invalid("m", "must be symmetric"));
                }
            }
        }
        let cm = Self {
            lam: m[0][0],
            alpha: if m[0][0] > T::zero() {
                m[0][2] / m[0][0]
            } else {
                T::zero()
            },
            m,
            rank_one: false,
        };
        let min = cm.eigenvalues()?[0];
        let scale = cm.max_abs().max(T::one());
        if min < -T::tol(RANK_TOL) * scale {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue: min.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(cm)
    }

    fn as_dense(&self) -> ComplexDense<T> {
        ComplexDense::from_fn(3, 3, |i, j| Complex::new(self.m[i][j], T::zero()))
    }

    fn max_abs(&self) -> T {
        self.m
            .iter()
            .flatten()
            .fold(T::zero(), |acc, x| acc.max(x.abs()))
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<T>> {
        Ok(eigh(&self.as_dense())?.values)
    }

    pub fn rank(&self) -> Result<usize> {
        Ok(self.loadings()?.len())
    }

    /// Loading vectors `l_k` with `m = Σ l_k l_kᵀ`.
    pub fn loadings(&self) -> Result<Vec<[T; 3]>> {
        if self.rank_one {
            let s = self.lam.sqrt();
            return Ok(vec![[s, s, s * self.alpha]]);
        }
        let e = eigh(&self.as_dense())?;
        let cut = T::lit(RANK_TOL) * self.max_abs();
        let mut out = Vec::new();
        for (k, &mu) in e.values.iter().enumerate().rev() {
            if mu > cut && mu > T::zero() {
                let v = e.vector(k);
                // Fix the sign so the loading is real and deterministic.
                let pivot = v
                    .iter()
                    .copied()
                    .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap_or_else(|| Complex::new(T::one(), T::zero()));
                let phase = pivot.conj() / pivot.norm();
                let s = mu.sqrt();
                out.push([
                    (v[0] * phase).re * s,
                    (v[1] * phase).re * s,
                    (v[2] * phase).re * s,
                ]);
            }
        }
        Ok(out)
    }
}

/// Temporal structure of the scalar processes driving each loading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind<T> {
    White,
    /// Ornstein–Uhlenbeck with autocovariance `e^{-|s|/τ_c}/(2τ_c)`.
    Ou { tau_c: T },
    /// Superposition of OU processes with log-spaced correlation times.
    OneOverF { f_min: T, f_max: T, per_decade: usize },
}

impl<T: Scalar> NoiseKind<T> {
    pub fn one_over_f_default() -> Self {
        NoiseKind::OneOverF {
            f_min: T::lit(1e-3),
            f_max: T::lit(1e1),
            per_decade: 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Ou { .. } => "ou",
            NoiseKind::OneOverF { .. } => "one_over_f",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::White => Ok(()),
            NoiseKind::Ou { tau_c } => {
                if tau_c > T::zero() && tau_c.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("tau_c", "must be positive and finite"))
                }
            }
            NoiseKind::OneOverF {
                f_min,
                f_max,
                per_decade,
            } => {
                if !(f_min > T::zero()) || !(f_max > f_min) || !f_max.is_finite() {
                    return Err(invalid("f_band", "need 0 < f_min < f_max < inf"));
                }
                if per_decade == 0 {
                    return Err(invalid("per_decade", "must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// A noise description: temporal kind plus channel correlations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel<T> {
    pub kind: NoiseKind<T>,
    pub corr: CorrelationMatrix<T>,
}

impl<T: Scalar> NoiseModel<T> {
    pub fn new(kind: NoiseKind<T>, corr: CorrelationMatrix<T>) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, corr })
    }

    pub fn white(lam: T, alpha: T) -> Result<Self> {
        Self::new(NoiseKind::White, build_correlation(lam, alpha)?)
    }
}

/// Per-step integrated noise `I_k = ∫ w_k dt` for the three channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePath<T> {
    pub dt: T,
    pub n_steps: usize,
    pub increments: Vec<[T; 3]>,
}

/// Derives an independent stream seed from `(master, trajectory, channel)`.
///
/// Each argument is folded in through the SplitMix64 finalizer, with a
/// distinct odd constant per position, so nearby inputs land on unrelated
/// seeds. The mapping is part of the reproducibility contract and must not
/// change.
pub fn derive_seed(master: u64, trajectory: u64, channel: u64) -> u64 {
    let mut h = splitmix64(master ^ 0x9E37_79B9_7F4A_7C15);
    h = splitmix64(h ^ trajectory.wrapping_mul(0xD1B5_4A32_D192_ED03));
    splitmix64(h ^ channel.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact one-step update of an OU state `x` (stationary variance `var`,
/// correlation time `tau`) together with its integral over the step.
#[derive(Clone, Debug)]
struct OuComponent {
    x: f64,
    a: f64,
    mean_y: f64,
    sd_x: f64,
    load_y: f64,
    sd_y: f64,
}

impl OuComponent {
    fn new(var: f64, tau: f64, h: f64, rng: &mut ChaCha8Rng) -> Self {
        let u = h / tau;
        let a = (-u).exp();
        let one_minus_a = -(-u).exp_m1();
        let one_minus_a2 = -(-2.0 * u).exp_m1();
        let bracket = integral_bracket(u);
        let var_x = var * one_minus_a2;
        let var_y = 2.0 * var * tau * tau * bracket;
        let cov = var * tau * one_minus_a * one_minus_a;
        let sd_x = var_x.sqrt();
        let (load_y, resid) = if sd_x > 0.0 {
            (cov / sd_x, var_y - cov * cov / var_x)
        } else {
            (0.0, var_y)
        };
        let x0: f64 = rng.sample(StandardNormal);
        Self {
            x: x0 * var.sqrt(),
            a,
            mean_y: tau * one_minus_a,
            sd_x,
            load_y,
            sd_y: resid.max(0.0).sqrt(),
        }
    }

    #[inline]
    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let y = self.x * self.mean_y + self.load_y * z1 + self.sd_y * z2;
        self.x = self.a * self.x + self.sd_x * z1;
        y
    }
}

/// `u - 2(1 - e^{-u}) + (1 - e^{-2u})/2`, by series where it cancels.
fn integral_bracket(u: f64) -> f64 {
    if u < 1e-2 {
        u.powi(3) / 3.0 - u.powi(4) / 4.0 + 7.0 * u.powi(5) / 60.0 - u.powi(6) / 24.0
    } else {
        u + 2.0 * (-u).exp_m1() - 0.5 * (-2.0 * u).exp_m1()
    }
}

#[derive(Clone, Debug)]
enum ScalarProcess {
    White { sqrt_dt: f64 },
    Sum(Vec<OuComponent>),
}

/// Correlation times and per-component variances of the OU superposition
/// used for 1/f noise. The spectral density of the sum is `1/f` (per unit
/// λ) across the band.
pub fn one_over_f_components(f_min: f64, f_max: f64, per_decade: usize) -> Vec<(f64, f64)> {
    let two_pi = std::f64::consts::TAU;
    let log_lo = (1.0 / (two_pi * f_max)).log10() - 1.0;
    let log_hi = (1.0 / (two_pi * f_min)).log10() + 1.0;
    let n = ((log_hi - log_lo) * per_decade as f64).ceil() as usize + 1;
    let step = (log_hi - log_lo) / (n - 1) as f64;
    let var = 2.0 * step * std::f64::consts::LN_10;
    (0..n)
        .map(|k| (10f64.powf(log_lo + step * k as f64), var))
        .collect()
}

/// Streaming generator of integrated three-channel noise.
#[derive(Clone, Debug)]
pub struct NoiseStream<T> {
    dt: T,
    factors: Vec<([f64; 3], ScalarProcess, ChaCha8Rng)>,
}

impl<T: Scalar> NoiseStream<T> {
    pub fn new(model: &NoiseModel<T>, dt: T, seed: u64) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(invalid("dt", "must be positive and finite"));
        }
        model.kind.validate()?;
        let h = dt.to_f64().expect("dt");
        let mut factors = Vec::new();
        for (k, l) in model.corr.loadings()?.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, k as u64));
            let load = [
                l[0].to_f64().expect("loading"),
                l[1].to_f64().expect("loading"),
                l[2].to_f64().expect("loading"),
            ];
            let proc = match model.kind {
                NoiseKind::White => ScalarProcess::White { sqrt_dt: h.sqrt() },
                NoiseKind::Ou { tau_c } => {
                    let tau = tau_c.to_f64().expect("tau");
                    ScalarProcess::Sum(vec![OuComponent::new(0.5 / tau, tau, h, &mut rng)])
                }
                NoiseKind::OneOverF {
                    f_min,
                    f_max,
                    per_decade,
                } => ScalarProcess::Sum(
                    one_over_f_components(
                        f_min.to_f64().expect("f_min"),
                        f_max.to_f64().expect("f_max"),
                        per_decade,
                    )
                    .into_iter()
                    .map(|(tau, var)| OuComponent::new(var, tau, h, &mut rng))
                    .collect(),
                ),
            };
            factors.push((load, proc, rng));
        }
        Ok(Self { dt, factors })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Integrated noise over the next step.
    pub fn next_increment(&mut self) -> [T; 3] {
        let mut acc = [0.0f64; 3];
        for (load, proc, rng) in &mut self.factors {
            let y = match proc {
                ScalarProcess::White { sqrt_dt } => {
                    let z: f64 = rng.sample(StandardNormal);
                    *sqrt_dt * z
                }
                ScalarProcess::Sum(parts) => parts.iter_mut().map(|p| p.step(rng)).sum(),
            };
            for c in 0..3 {
                acc[c] += load[c] * y;
            }
        }
        [T::lit(acc[0]), T::lit(acc[1]), T::lit(acc[2])]
    }

    pub fn take_path(&mut self, n_steps: usize) -> NoisePath<T> {
        NoisePath {
            dt: self.dt,
            n_steps,
            increments: (0..n_steps).map(|_| self.next_increment()).collect(),
        }
    }
}

/// Samples any noise kind.
pub fn sample_path<T: Scalar>(
    model: &NoiseModel<T>,
    dt: T,
    n_steps: usize,
    stream_seed: u64,
) -> Result<NoisePath<T>> {
    Ok(NoiseStream::new(model, dt, stream_seed)?.take_path(n_steps))
}

fn expect_kind<T: Scalar>(model: &NoiseModel<T>, want: &'static str) -> Result<()> {
    if model.kind.label() == want {
        Ok(())
    } else {
        Err(invalid(
            "kind",
            format!("expected {want} noise, got {}", model.kind.label()),
        ))
    }
}

pub fn sample_white<T: Scalar>(
    model: &NoiseModel<T>,
    dt: T,
    n_steps: usize,
    stream_seed: u64,
) -> Result<NoisePath<T>> {
    expect_kind(model, "white")?;
    sample_path(model, dt, n_steps, stream_seed)
}

pub fn sample_ou<T: Scalar>(
    model: &NoiseModel<T>,
    dt: T,
    n_steps: usize,
    stream_seed: u64,
) -> Result<NoisePath<T>> {
    expect_kind(model, "ou")?;
    sample_path(model, dt, n_steps, stream_seed)
}

pub fn sample_one_over_f<T: Scalar>(
    model: &NoiseModel<T>,
    dt: T,
    n_steps: usize,
    stream_seed: u64,
) -> Result<NoisePath<T>> {
    expect_kind(model, "one_over_f")?;
    sample_path(model, dt, n_steps, stream_seed)
}

/// Second-order rates of a generic (possibly colored) noise acting through
/// `w_S` and `w_SA`, all sharing one correlation shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericNoiseRates<T> {
    pub lam_s: T,
    pub lam_s_sa: T,
    pub lam_sa_sa: T,
    pub shape: NoiseKind<T>,
    /// `(λ, α)` when the rates come from [`GenericNoiseRates::from_lambda_alpha`].
    #[serde(skip)]
    family: Option<(T, T)>,
}

impl<T: Scalar> GenericNoiseRates<T> {
    pub fn new(lam_s: T, lam_s_sa: T, lam_sa_sa: T, shape: NoiseKind<T>) -> Result<Self> {
        let r = Self {
            lam_s,
            lam_s_sa,
            lam_sa_sa,
            shape,
            family: None,
        };
        let tr = lam_s + lam_sa_sa;
        let det = lam_s * lam_sa_sa - lam_s_sa * lam_s_sa;
        let disc = ((lam_s - lam_sa_sa) * (lam_s - lam_sa_sa) + T::lit(4.0) * lam_s_sa * lam_s_sa).sqrt();
        let min = (tr - disc) * T::lit(0.5);
        let scale = T::one() + lam_s.abs().max(lam_sa_sa.abs());
        if lam_s < T::zero() || lam_sa_sa < T::zero() || det < -T::tol(1e-12) * scale * scale {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue: min.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(r)
    }

    /// Rates implied by the single-parameter family `λ_S = λ`,
    /// `λ_{S,SA} = λα`, `λ_{SA,SA} = λα²`.
    pub fn from_lambda_alpha(lam: T, alpha: T, shape: NoiseKind<T>) -> Result<Self> {
        let mut r = Self::new(lam, lam * alpha, lam * alpha * alpha, shape)?;
        r.family = Some((lam, alpha));
        Ok(r)
    }
}

/// `λ_S + 2ℓ λ_{S,SA} + ℓ² λ_{SA,SA}`, the weight of the surviving
/// system-dephasing correlator when the ancilla sits in `|ℓ⟩`.
///
/// Rates from the `(λ, α)` family are evaluated in the factored form
/// `λ(1 + ℓα)²`, which is exactly zero at `α = -1/ℓ`.
pub fn cancellation_residual<T: Scalar>(r: &GenericNoiseRates<T>, ell: T) -> T {
    match r.family {
        Some((lam, alpha)) => {
            let f = T::one() + ell * alpha;
            lam * f * f
        }
        None => r.lam_s + T::lit(2.0) * ell * r.lam_s_sa + ell * ell * r.lam_sa_sa,
    }
}

/// Interaction strength that cancels dephasing for ancilla level `ell`.
pub fn cancellation_alpha<T: Scalar>(ell: T) -> Result<T> {
    if ell == T::zero() {
        return Err(invalid("ell", "no cancelling alpha exists for ell = 0"));
    }
    Ok(-T::one() / ell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rustfft::{num_complex::Complex64, FftPlanner};

    #[test]
    fn correlation_examples() {
        let c = build_correlation(1.0f64, 0.0).unwrap();
        assert_eq!(c.m, [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let c = build_correlation(0.1f64, -2.0).unwrap();
        let ev = c.eigenvalues().unwrap();
        assert!((ev[2] - 0.6).abs() < 1e-12);
        assert!(ev[0].abs() < 1e-12 && ev[1].abs() < 1e-12);
        assert_eq!(c.rank().unwrap(), 1);
        assert!(build_correlation(0.0f64, 1.0).is_err());
        assert!(build_correlation(-1.0f64, 1.0).is_err());
    }

    #[test]
    fn custom_correlations() {
        let c = CorrelationMatrix::custom([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 0.2]]).unwrap();
        let ls = c.loadings().unwrap();
        assert_eq!(ls.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = ls.iter().map(|l| l[i] * l[j]).sum();
                assert!((s - c.m[i][j]).abs() < 1e-12);
            }
        }
        let bad = CorrelationMatrix::custom([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(bad, Err(Error::NotPositiveSemiDefinite { .. })));
        let zero = CorrelationMatrix::custom([[0.0f64; 3]; 3]).unwrap();
        let model = NoiseModel::new(NoiseKind::White, zero).unwrap();
        let p = sample_white(&model, 0.1, 100, 3).unwrap();
        assert!(p.increments.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn increments_vanish_with_lambda() {
        for kind in [
            NoiseKind::White,
            NoiseKind::Ou { tau_c: 0.5 },
            NoiseKind::one_over_f_default(),
        ] {
            let big = NoiseModel::new(kind, build_correlation(1.0f64, 0.7).unwrap()).unwrap();
            let tiny = NoiseModel::new(kind, build_correlation(1e-24f64, 0.7).unwrap()).unwrap();
            let pb = sample_path(&big, 0.01, 500, 9).unwrap();
            let pt = sample_path(&tiny, 0.01, 500, 9).unwrap();
            for (a, b) in pb.increments.iter().zip(&pt.increments) {
                for c in 0..3 {
                    assert!((b[c] - a[c] * 1e-12).abs() <= 1e-24 + 1e-9 * (a[c] * 1e-12).abs());
                }
            }
        }
    }

    #[test]
    fn white_statistics() {
        let (lam, alpha, dt, n) = (0.3f64, -2.0, 0.01, 1_000_000usize);
        let model = NoiseModel::white(lam, alpha).unwrap();
        let p = sample_white(&model, dt, n, 42).unwrap();
        assert!(p.increments.iter().all(|i| i[0] == i[1]));
        let mut cov = [[0.0f64; 3]; 3];
        for inc in &p.increments {
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += (inc[i] / dt) * (inc[j] / dt);
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let est = cov[i][j] / n as f64;
                let want = model.corr.m[i][j] / dt;
                assert!((est - want).abs() <= 0.02 * want.abs(), "{i}{j}: {est} vs {want}");
            }
        }
        let x: Vec<f64> = p.increments.iter().map(|i| i[0]).collect();
        let r = lag_corr(&x, 1);
        assert!(r.abs() <= 3.0 / (n as f64).sqrt(), "lag-1 r = {r}");
    }

    fn lag_corr(x: &[f64], k: usize) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let cov = (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum::<f64>() / (n - k) as f64;
        cov / var
    }

    #[test]
    fn ou_statistics() {
        let (dt, tau, lam, n) = (0.01f64, 0.1, 0.5, 1_000_000usize);
        let model = NoiseModel::new(NoiseKind::Ou { tau_c: tau }, build_correlation(lam, 1.0).unwrap()).unwrap();
        let p = sample_ou(&model, dt, n, 7).unwrap();
        let y: Vec<f64> = p.increments.iter().map(|i| i[0]).collect();
        let kmax = (3.0 * tau / dt).round() as usize;
        for k in 1..=kmax {
            let r = lag_corr(&y, k);
            let want = (-(k as f64) * dt / tau).exp();
            assert!((r - want).abs() <= 0.05, "lag {k}: {r} vs {want}");
        }
        let u: f64 = dt / tau;
        let a = (-u).exp();
        let var_y = lam * 2.0 * (0.5 / tau) * tau * tau * (u - 1.0 + (-u).exp());
        // Exact lag correlation of the step integrals.
        for k in 1..=5 {
            let cov = lam * (0.5 / tau) * tau * tau * (1.0 - a).powi(2) * a.powi(k - 1);
            let r = lag_corr(&y, k as usize);
            assert!((r - cov / var_y).abs() <= 0.01, "lag {k}: {r} vs {}", cov / var_y);
        }
        let mean = y.iter().sum::<f64>() / n as f64;
        let est = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((est - var_y).abs() <= 0.02 * var_y, "{est} vs {var_y}");
    }

    #[test]
    fn ou_short_correlation_approaches_white() {
        let (dt, n) = (0.01f64, 200_000usize);
        let model = NoiseModel::new(NoiseKind::Ou { tau_c: 1e-5 }, build_correlation(1.0, 0.0).unwrap()).unwrap();
        let p = sample_ou(&model, dt, n, 1).unwrap();
        let var = p.increments.iter().map(|i| i[0] * i[0]).sum::<f64>() / n as f64;
        assert!((var - dt).abs() <= 0.02 * dt);
        assert!(NoiseModel::new(NoiseKind::Ou { tau_c: 0.0 }, build_correlation(1.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ou_small_step_series_is_continuous() {
        let u = 1e-2f64;
        let series = u.powi(3) / 3.0 - u.powi(4) / 4.0 + 7.0 * u.powi(5) / 60.0 - u.powi(6) / 24.0;
        let direct = u + 2.0 * (-u).exp_m1() - 0.5 * (-2.0 * u).exp_m1();
        assert!((series - direct).abs() / direct < 1e-8);
        assert!((integral_bracket(u * (1.0 - 1e-12)) - integral_bracket(u)).abs() / direct < 1e-8);
    }

    fn log_binned_slope(y: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> f64 {
        let n = y.len();
        // Hann taper against leakage from the steep low-frequency end.
        let mut buf: Vec<Complex64> = y
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos();
                Complex64::new(w * v / dt, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df = 1.0 / (n as f64 * dt);
        let bins = 24;
        let (l0, l1) = (f_lo.log10(), f_hi.log10());
        let mut acc = vec![(0.0, 0.0, 0usize); bins];
        for (k, z) in buf.iter().enumerate().take(n / 2).skip(1) {
            let f = k as f64 * df;
            if f < f_lo || f > f_hi {
                continue;
            }
            let b = (((f.log10() - l0) / (l1 - l0)) * bins as f64).floor() as usize;
            let b = b.min(bins - 1);
            acc[b].0 += z.norm_sqr();
            acc[b].1 += f.log10();
            acc[b].2 += 1;
        }
        let pts: Vec<(f64, f64)> = acc
            .iter()
            .enumerate()
            .filter(|(_, (_, _, c))| *c > 0)
            .map(|(_, (s, lf, c))| (lf / *c as f64, (s / *c as f64).log10()))
            .collect();
        crate::fit::linear_fit(&pts).unwrap().0
    }

    #[test]
    fn one_over_f_slope_and_linearity() {
        let (dt, n) = (0.02f64, 1usize << 20);
        let kind = NoiseKind::one_over_f_default();
        let m1 = NoiseModel::new(kind, build_correlation(0.2, 0.0).unwrap()).unwrap();
        let m2 = NoiseModel::new(kind, build_correlation(0.4, 0.0).unwrap()).unwrap();
        let p1 = sample_one_over_f(&m1, dt, n, 5).unwrap();
        let y1: Vec<f64> = p1.increments.iter().map(|i| i[0]).collect();
        let slope = log_binned_slope(&y1, dt, 1e-3, 1e1);
        assert!((-1.15..=-0.85).contains(&slope), "slope {slope}");

        let p2 = sample_one_over_f(&m2, dt, n, 5).unwrap();
        let e1: f64 = y1.iter().map(|v| v * v).sum();
        let e2: f64 = p2.increments.iter().map(|i| i[0] * i[0]).sum();
        assert!((e2 / e1 - 2.0).abs() <= 0.1);
        assert!(NoiseModel::new(
            NoiseKind::OneOverF { f_min: 1.0, f_max: 0.5, per_decade: 3 },
            build_correlation(1.0, 0.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let m = NoiseModel::white(1.0f64, 0.0).unwrap();
        assert!(sample_ou(&m, 0.1, 10, 0).is_err());
        assert!(sample_one_over_f(&m, 0.1, 10, 0).is_err());
        assert!(sample_white(&m, 0.0, 10, 0).is_err());
    }

    #[test]
    fn determinism_and_seed_separation() {
        for kind in [NoiseKind::White, NoiseKind::Ou { tau_c: 2.0 }, NoiseKind::one_over_f_default()] {
            let m = NoiseModel::new(kind, build_correlation(0.1f64, -2.0).unwrap()).unwrap();
            let a = sample_path(&m, 0.01, 1000, 99).unwrap();
            let b = sample_path(&m, 0.01, 1000, 99).unwrap();
            let c = sample_path(&m, 0.01, 1000, 100).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
        assert_eq!(derive_seed(7, 3, 2), derive_seed(7, 3, 2));
    }

    #[test]
    fn residual_examples() {
        let r = GenericNoiseRates::from_lambda_alpha(1.0f64, 0.0, NoiseKind::White).unwrap();
        assert_eq!(cancellation_residual(&r, 0.5), 1.0);
        let r = GenericNoiseRates::from_lambda_alpha(0.1f64, -1.8, NoiseKind::White).unwrap();
        assert!((cancellation_residual(&r, 0.5) - 0.001).abs() < 1e-15);
        assert!(GenericNoiseRates::new(1.0f64, 2.0, 1.0, NoiseKind::White).is_err());
        assert!(cancellation_alpha(0.0f64).is_err());
    }

    #[test]
    fn residual_vanishes_exactly_at_cancellation() {
        for lam in [0.1f64, 0.5, 1.0, 3.0, 0.01] {
            for ell in [0.5f64, -0.5, 1.0, -1.0, 1.5, -1.5, 2.0, -2.0, 2.5, -2.5] {
                let alpha = cancellation_alpha(ell).unwrap();
                let kind = NoiseKind::Ou { tau_c: 1.0 };
                let r = GenericNoiseRates::from_lambda_alpha(lam, alpha, kind).unwrap();
                assert_eq!(cancellation_residual(&r, ell), 0.0, "lam={lam} ell={ell}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn correlation_is_psd_rank_one(lam in 1e-6f64..10.0, alpha in -10.0f64..10.0) {
            let c = build_correlation(lam, alpha).unwrap();
            let ev = c.eigenvalues().unwrap();
            let scale = lam * (2.0 + alpha * alpha);
            prop_assert!(ev[0] >= -1e-12 * scale.max(1.0));
            prop_assert!(ev[1].abs() <= 1e-12 * scale.max(1.0));
            prop_assert!((ev[2] - scale).abs() <= 1e-12 * scale.max(1.0));
            prop_assert_eq!(c.loadings().unwrap().len(), 1);
        }

        #[test]
        fn lambda_residual_formula(lam in 0.0f64..5.0, alpha in -5.0f64..5.0, k in -6i32..=6) {
            let ell = k as f64 / 2.0;
            let r = GenericNoiseRates::from_lambda_alpha(lam, alpha, NoiseKind::White).unwrap();
            let want = lam * (1.0 + ell * alpha).powi(2);
            prop_assert!((cancellation_residual(&r, ell) - want).abs() <= 1e-10 * (1.0 + want));
        }
    }
}

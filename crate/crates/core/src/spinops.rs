//! Angular-momentum algebras and the Hamiltonians built from them.
//!
//! A double well holding `N` bosons is represented by its Jordan–Schwinger
//! spin image of dimension `d = N + 1`. The `Jz` eigenbasis is ordered by
//! ascending eigenvalue `-j, ..., +j`, so basis index `k` carries `m = k - j`.
//! Composite operators are ordered `system ⊗ ancilla`.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrixcore::{kron, ComplexDense};
use crate::scalar::Scalar;

/// Spin-`j` operators in dimension `d = 2j + 1`.
#[derive(Clone, Debug)]
pub struct SpinAlgebra<T> {
    pub dim: usize,
    pub j: T,
    pub jx: ComplexDense<T>,
    pub jy: ComplexDense<T>,
    pub jz: ComplexDense<T>,
    pub jplus: ComplexDense<T>,
    pub jminus: ComplexDense<T>,
}

impl<T: Scalar> SpinAlgebra<T> {
    /// `Jz` eigenvalue of basis vector `k`.
    pub fn m(&self, k: usize) -> T {
        T::from_usize(k).expect("index") - self.j
    }

    /// Basis index of the `Jz` eigenvalue `ell`, if it is in the spectrum.
    pub fn index_of(&self, ell: T) -> Option<usize> {
        let k = (ell + self.j).round();
        let tol = T::lit(1e-9);
        if ((ell + self.j) - k).abs() > tol || k < -tol {
            return None;
        }
        let k = k.to_usize()?;
        (k < self.dim).then_some(k)
    }

    pub fn identity(&self) -> ComplexDense<T> {
        ComplexDense::identity(self.dim)
    }

    /// Diagonal of `Jz` as reals.
    pub fn jz_diag(&self) -> Vec<T> {
        (0..self.dim).map(|k| self.m(k)).collect()
    }
}

pub fn make_spin<T: Scalar>(d: usize) -> Result<SpinAlgebra<T>> {
    if d < 2 {
        return Err(invalid("d", format!("spin dimension must be at least 2, got {d}")));
    }
    let j = T::lit((d as f64 - 1.0) / 2.0);
    let ms: Vec<T> = (0..d).map(|k| T::lit(k as f64) - j).collect();
    let jz = ComplexDense::from_real_diag(&ms);
    let mut jplus = ComplexDense::zeros(d, d);
    for k in 0..d - 1 {
        let m = ms[k];
        let amp = (j * (j + T::one()) - m * (m + T::one())).sqrt();
        jplus[(k + 1, k)] = Complex::new(amp, T::zero());
    }
    let jminus = jplus.adjoint();
    let half = T::lit(0.5);
    let jx = (&jplus + &jminus).scale_real(half);
    let jy = (&jplus - &jminus).scale(Complex::new(T::zero(), -half));
    Ok(SpinAlgebra {
        dim: d,
        j,
        jx,
        jy,
        jz,
        jplus,
        jminus,
    })
}

/// `|ℓ⟩⟨ℓ|` in the `Jz` eigenbasis.
pub fn projector<T: Scalar>(alg: &SpinAlgebra<T>, ell: T) -> Result<ComplexDense<T>> {
    let k = alg.index_of(ell).ok_or_else(|| {
        invalid(
            "ell",
            format!("{ell} is not a Jz eigenvalue for spin j = {}", alg.j),
        )
    })?;
    let mut p = ComplexDense::zeros(alg.dim, alg.dim);
    p[(k, k)] = Complex::new(T::one(), T::zero());
    Ok(p)
}

/// `(|ℓ=-N/2⟩ + sign |ℓ=+N/2⟩)/√2` as an `(N+1) x 1` column.
pub fn noon_state<T: Scalar>(n: usize, sign: i32) -> Result<ComplexDense<T>> {
    if n < 1 {
        return Err(invalid("n", "NOON state needs at least one boson"));
    }
    if sign != 1 && sign != -1 {
        return Err(invalid("sign", format!("must be +1 or -1, got {sign}")));
    }
    let h = T::lit(0.5).sqrt();
    let mut v = vec![Complex::new(T::zero(), T::zero()); n + 1];
    v[0] = Complex::new(h, T::zero());
    v[n] = Complex::new(h * T::lit(sign as f64), T::zero());
    Ok(ComplexDense::column(&v))
}

/// Coefficients of `η (Jz)² − γ Jx − Δ Jz` for one double well.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams<T> {
    pub eta: T,
    pub gamma: T,
    pub delta: T,
    pub n_bosons: usize,
}

impl<T: Scalar> SystemParams<T> {
    pub fn new(eta: T, gamma: T, delta: T, n_bosons: usize) -> Self {
        Self {
            eta,
            gamma,
            delta,
            n_bosons,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_bosons + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bosons < 1 {
            return Err(invalid("n_bosons", "must be at least 1"));
        }
        for (name, v) in [("eta", self.eta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(())
    }
}

fn well_hamiltonian<T: Scalar>(p: &SystemParams<T>) -> Result<ComplexDense<T>> {
    p.validate()?;
    let s = make_spin::<T>(p.dim())?;
    let jz2 = &s.jz * &s.jz;
    let mut h = jz2.scale_real(p.eta);
    h -= &s.jx.scale_real(p.gamma);
    h -= &s.jz.scale_real(p.delta);
    Ok(h)
}

/// System Hamiltonian `η (Jz)² − γ Jx − Δ Jz`.
pub fn build_hs<T: Scalar>(p: &SystemParams<T>) -> Result<ComplexDense<T>> {
    well_hamiltonian(p)
}

/// Ancilla Hamiltonian. Same form as [`build_hs`]; the bare ancilla has
/// `gamma = 0`, a nonzero value gives the tunnelling plaquette variant.
pub fn build_ha<T: Scalar>(p: &SystemParams<T>) -> Result<ComplexDense<T>> {
    well_hamiltonian(p)
}

/// `hs ⊗ I + I ⊗ ha + α Jz ⊗ Jz`.
pub fn build_h0<T: Scalar>(
    hs: &ComplexDense<T>,
    ha: &ComplexDense<T>,
    alpha: T,
    d_s: usize,
    d_a: usize,
) -> Result<ComplexDense<T>> {
    if hs.rows() != d_s || hs.cols() != d_s || ha.rows() != d_a || ha.cols() != d_a {
        return Err(Error::DimensionMismatch {
            op: "build_h0",
            detail: format!(
                "hs is {}x{}, ha is {}x{}, expected {d_s} and {d_a}",
                hs.rows(),
                hs.cols(),
                ha.rows(),
                ha.cols()
            ),
        });
    }
    let js = make_spin::<T>(d_s)?;
    let ja = make_spin::<T>(d_a)?;
    let mut h = kron(hs, &ComplexDense::identity(d_a));
    h += &kron(&ComplexDense::identity(d_s), ha);
    h += &kron(&js.jz, &ja.jz).scale_real(alpha);
    Ok(h)
}

/// `hs − Jz`, the effective system Hamiltonian in the dark sector.
pub fn build_heff<T: Scalar>(hs: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    let d = hs.require_square()?;
    let s = make_spin::<T>(d)?;
    Ok(hs - &s.jz)
}

/// Four-site (two double wells) Bose–Hubbard plaquette couplings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteParams<T> {
    pub t_s: T,
    pub t_a: T,
    pub u_s: T,
    pub u_1: T,
    pub mu_sr: T,
    pub mu_sl: T,
    pub mu_ar: T,
    pub mu_al: T,
}

/// Spin-model parameters implied by a [`PlaquetteParams`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteDerived<T> {
    pub gamma_s: T,
    pub gamma_a: T,
    pub delta_s: T,
    pub delta_a: T,
    pub eta: T,
    pub alpha: T,
}

impl<T: Scalar> PlaquetteParams<T> {
    pub fn derived(&self) -> PlaquetteDerived<T> {
        let two = T::lit(2.0);
        PlaquetteDerived {
            gamma_s: two * self.t_s,
            gamma_a: two * self.t_a,
            delta_s: self.mu_sr - self.mu_sl,
            delta_a: self.mu_ar - self.mu_al,
            eta: self.u_s,
            alpha: -two * self.u_1,
        }
    }
}

/// Composite plaquette Hamiltonian for `n` bosons per double well, with the
/// identity offset dropped.
pub fn build_plaquette<T: Scalar>(
    p: &PlaquetteParams<T>,
    n: usize,
) -> Result<(ComplexDense<T>, PlaquetteDerived<T>)> {
    if n < 1 {
        return Err(invalid("n", "each double well needs at least one boson"));
    }
    let dv = p.derived();
    let s = make_spin::<T>(n + 1)?;
    let id = s.identity();
    let jz2 = &s.jz * &s.jz;
    let mut h = kron(&s.jx, &id).scale_real(-dv.gamma_s);
    h -= &kron(&id, &s.jx).scale_real(dv.gamma_a);
    h -= &kron(&s.jz, &id).scale_real(dv.delta_s);
    h -= &kron(&id, &s.jz).scale_real(dv.delta_a);
    h += &kron(&s.jz, &s.jz).scale_real(dv.alpha);
    let quad = dv.eta + dv.alpha * T::lit(0.5);
    h += &(&kron(&jz2, &id) + &kron(&id, &jz2)).scale_real(quad);
    Ok((h, dv))
}

/// Single-laser drive parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserParams<T> {
    pub g: T,
    pub omega0: T,
    pub detuning: T,
    pub phi0: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserDerived<T> {
    pub c_s: T,
    pub c_sa: T,
    pub alpha: T,
}

/// `c_s = 2Ω₀²/Δ`, `c_sa = (g/Δ) cos φ₀` and their ratio `α = c_sa / c_s`.
pub fn laser_derived<T: Scalar>(p: &LaserParams<T>) -> Result<LaserDerived<T>> {
    if p.omega0 == T::zero() || !p.omega0.is_finite() {
        return Err(invalid("omega0", "must be finite and nonzero"));
    }
    if p.detuning == T::zero() || !p.detuning.is_finite() {
        return Err(invalid("detuning", "must be finite and nonzero"));
    }
    let c_s = T::lit(2.0) * p.omega0 * p.omega0 / p.detuning;
    let c_sa = p.g / p.detuning * p.phi0.cos();
    Ok(LaserDerived {
        c_s,
        c_sa,
        alpha: c_sa / c_s,
    })
}

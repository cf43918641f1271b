//! GKSL generators for correlated dephasing and their propagation.
//!
//! A generator is stored as a Hamiltonian plus a list of weighted operator
//! pairs `(w, L, R)`, each acting as `w (L ρ R − ½{R L, ρ})`. A dissipator
//! `𝕄[O]` is the pair `(1, O, O†)`. The superoperator uses column-stacking
//! vectorization, under which `vec(AXB) = (Bᵀ ⊗ A) vec(X)`.

use std::ops::ControlFlow;
use std::sync::OnceLock;

use num_complex::Complex;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrixcore::{
    anticommutator, commutator, devectorize_slice, expm_pade, kron, min_eigenvalue, vectorize,
    ComplexDense,
};
use crate::noise::CorrelationMatrix;
use crate::scalar::Scalar;
use crate::spinops::{build_h0, build_heff, projector, SpinAlgebra};

/// Largest component of the superoperator that is exponentiated densely.
/// Larger components are integrated with an adaptive Runge–Kutta scheme.
pub const DENSE_BLOCK_MAX: usize = 4096;

/// Largest Hilbert dimension for which the full superoperator matrix may be
/// materialized.
pub const FULL_SUPEROPERATOR_MAX_DIM: usize = 36;

/// Tolerance on the validity of an input density matrix.
pub const INPUT_TOL: f64 = 1e-10;
/// Allowed drift of trace, Hermiticity and positivity during propagation.
pub const DRIFT_TOL: f64 = 1e-8;

/// One weighted operator pair of a generator.
#[derive(Clone, Debug)]
pub struct GkslTerm<T> {
    pub weight: T,
    pub left: ComplexDense<T>,
    pub right: ComplexDense<T>,
}

/// `weight · (A_i ρ A_j − ½{A_j A_i, ρ})`.
pub fn cross_term<T: Scalar>(weight: T, a_i: &ComplexDense<T>, a_j: &ComplexDense<T>) -> GkslTerm<T> {
    GkslTerm {
        weight,
        left: a_i.clone(),
        right: a_j.clone(),
    }
}

/// `𝕄[O]ρ = OρO† − ½{O†O, ρ}`.
pub fn dissipator<T: Scalar>(o: &ComplexDense<T>) -> GkslTerm<T> {
    GkslTerm {
        weight: T::one(),
        left: o.clone(),
        right: o.adjoint(),
    }
}

impl<T: Scalar> GkslTerm<T> {
    pub fn scaled(mut self, w: T) -> Self {
        self.weight = self.weight * w;
        self
    }

    /// The term's action on `rho`.
    pub fn apply(&self, rho: &ComplexDense<T>) -> ComplexDense<T> {
        let sandwich = &(&self.left * rho) * &self.right;
        let m = &self.right * &self.left;
        let anti = anticommutator(&m, rho).scale_real(T::lit(0.5));
        (&sandwich - &anti).scale_real(self.weight)
    }
}

/// Structure of a `system ⊗ ancilla` generator, kept so the dark-sector
/// dynamics can be checked against its closed form.
#[derive(Clone, Debug)]
pub struct Bipartite<T> {
    pub d_s: usize,
    pub d_a: usize,
    pub h_s: ComplexDense<T>,
    pub h_a: ComplexDense<T>,
    pub alpha: T,
}

/// Hamiltonian plus weighted jump-operator pairs.
#[derive(Clone, Debug)]
pub struct GkslGenerator<T> {
    pub dim: usize,
    pub h0: ComplexDense<T>,
    pub terms: Vec<GkslTerm<T>>,
    pub bipartite: Option<Bipartite<T>>,
    superop: OnceLock<ComplexDense<T>>,
    components: OnceLock<Vec<Vec<usize>>>,
}

impl<T: Scalar> GkslGenerator<T> {
    pub fn new(h0: ComplexDense<T>) -> Result<Self> {
        let dim = h0.require_square()?;
        Ok(Self {
            dim,
            h0,
            terms: Vec::new(),
            bipartite: None,
            superop: OnceLock::new(),
            components: OnceLock::new(),
        })
    }

    pub fn push(&mut self, term: GkslTerm<T>) -> Result<()> {
        for m in [&term.left, &term.right] {
            if m.rows() != self.dim || m.cols() != self.dim {
                return Err(Error::DimensionMismatch {
                    op: "GkslGenerator::push",
                    detail: format!("{}x{} operator on dimension {}", m.rows(), m.cols(), self.dim),
                });
            }
        }
        if term.weight != T::zero() {
            self.terms.push(term);
        }
        self.superop = OnceLock::new();
        self.components = OnceLock::new();
        Ok(())
    }

    pub fn with_term(mut self, term: GkslTerm<T>) -> Result<Self> {
        self.push(term)?;
        Ok(self)
    }

    pub fn with_bipartite(mut self, b: Bipartite<T>) -> Self {
        self.bipartite = Some(b);
        self
    }

    /// `L ρ`, computed in operator form.
    pub fn apply(&self, rho: &ComplexDense<T>) -> ComplexDense<T> {
        let mut out = commutator(&self.h0, rho).scale(Complex::new(T::zero(), -T::one()));
        for t in &self.terms {
            out += &t.apply(rho);
        }
        out
    }

    /// Dense `n² x n²` superoperator, assembled once and cached.
    pub fn superoperator(&self) -> Result<&ComplexDense<T>> {
        if self.dim > FULL_SUPEROPERATOR_MAX_DIM {
            return Err(invalid(
                "dim",
                format!(
                    "full superoperator limited to dimension {FULL_SUPEROPERATOR_MAX_DIM}, got {}",
                    self.dim
                ),
            ));
        }
        Ok(self.superop.get_or_init(|| self.assemble_superoperator()))
    }

    fn assemble_superoperator(&self) -> ComplexDense<T> {
        let n = self.dim;
        let id = ComplexDense::<T>::identity(n);
        let mi = Complex::new(T::zero(), -T::one());
        let mut s = (&kron(&id, &self.h0) - &kron(&self.h0.transpose(), &id)).scale(mi);
        let half = T::lit(0.5);
        for t in &self.terms {
            let m = &t.right * &t.left;
            let mut part = kron(&t.right.transpose(), &t.left);
            part -= &kron(&id, &m).scale_real(half);
            part -= &kron(&m.transpose(), &id).scale_real(half);
            s += &part.scale_real(t.weight);
        }
        s
    }

    /// Connected components of the coupling graph between vectorized
    /// matrix entries. Each component is an invariant subspace of the
    /// superoperator.
    pub fn components(&self) -> &[Vec<usize>] {
        self.components.get_or_init(|| self.find_components())
    }

    fn find_components(&self) -> Vec<Vec<usize>> {
        let n = self.dim;
        let mut uf = UnionFind::new(n * n);
        let nz = |m: &ComplexDense<T>| -> Vec<(usize, usize)> {
            let mut v = Vec::new();
            for i in 0..n {
                for k in 0..n {
                    if !m[(i, k)].is_zero() {
                        v.push((i, k));
                    }
                }
            }
            v
        };
        // Left and right multiplication by an operator with entry (i, k).
        let one_sided = |m: &ComplexDense<T>, uf: &mut UnionFind| {
            for (i, k) in nz(m) {
                if i == k {
                    continue;
                }
                for j in 0..n {
                    uf.union(j * n + i, j * n + k);
                    uf.union(i * n + j, k * n + j);
                }
            }
        };
        one_sided(&self.h0, &mut uf);
        for t in &self.terms {
            one_sided(&(&t.right * &t.left), &mut uf);
            let l = nz(&t.left);
            let r = nz(&t.right);
            for &(i, k) in &l {
                for &(lc, j) in &r {
                    uf.union(j * n + i, lc * n + k);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for p in 0..n * n {
            groups.entry(uf.find(p)).or_default().push(p);
        }
        groups.into_values().collect()
    }

    /// Dense restriction of the superoperator to `indices`.
    fn block(&self, indices: &[usize]) -> ComplexDense<T> {
        let n = self.dim;
        let m = indices.len();
        let half = T::lit(0.5);
        let mi = Complex::new(T::zero(), -T::one());
        let products: Vec<ComplexDense<T>> = self.terms.iter().map(|t| &t.right * &t.left).collect();
        let mut b = ComplexDense::zeros(m, m);
        for (pl, &p) in indices.iter().enumerate() {
            let (i, j) = (p % n, p / n);
            for (ql, &q) in indices.iter().enumerate() {
                let (k, l) = (q % n, q / n);
                let mut v = Complex::zero();
                if j == l {
                    v = v + mi * self.h0[(i, k)];
                }
                if i == k {
                    v = v - mi * self.h0[(l, j)];
                }
                for (t, mm) in self.terms.iter().zip(&products) {
                    let mut acc = t.left[(i, k)] * t.right[(l, j)];
                    if j == l {
                        acc = acc - mm[(i, k)] * half;
                    }
                    if i == k {
                        acc = acc - mm[(l, j)] * half;
                    }
                    v = v + acc * t.weight;
                }
                b[(pl, ql)] = v;
            }
        }
        b
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// `(Jz⊗I, I⊗Jz, Jz⊗Jz)`.
pub fn jump_operators<T: Scalar>(
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
) -> [ComplexDense<T>; 3] {
    [
        kron(&spin_s.jz, &spin_a.identity()),
        kron(&spin_s.identity(), &spin_a.jz),
        kron(&spin_s.jz, &spin_a.jz),
    ]
}

fn check_dims<T: Scalar>(
    op: &'static str,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
    h0: &ComplexDense<T>,
) -> Result<()> {
    let n = spin_s.dim * spin_a.dim;
    if h0.rows() != n || h0.cols() != n {
        return Err(Error::DimensionMismatch {
            op,
            detail: format!("h0 is {}x{}, expected {n}x{n}", h0.rows(), h0.cols()),
        });
    }
    Ok(())
}

fn check_psd<T: Scalar>(corr: &CorrelationMatrix<T>) -> Result<()> {
    let ev = corr.eigenvalues()?;
    let scale = ev.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
    if ev[0] < -T::tol(1e-12) * scale {
        return Err(Error::NotPositiveSemiDefinite {
            min_eigenvalue: ev[0].to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// `Σ_ij Λ_ij (A_i ρ A_j − ½{A_j A_i, ρ}) − i[h0, ρ]`.
pub fn assemble_generator<T: Scalar>(
    corr: &CorrelationMatrix<T>,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
    h0: &ComplexDense<T>,
) -> Result<GkslGenerator<T>> {
    check_dims("assemble_generator", spin_s, spin_a, h0)?;
    check_psd(corr)?;
    let a = jump_operators(spin_s, spin_a);
    let mut g = GkslGenerator::new(h0.clone())?;
    for i in 0..3 {
        for j in 0..3 {
            g.push(cross_term(corr.m[i][j], &a[i], &a[j]))?;
        }
    }
    Ok(g)
}

/// Split form built from `Ô₁ = √λ Jz⊗J_A(α)`, `Ô₂ = √λ J_S(α)⊗Jz` and
/// `Ô± = √(λ/2)(Jz⊗I ± I⊗Jz)` with `J(α) = I + αJz`.
///
/// `𝕄[Ô₁]` and `𝕄[Ô₂]` each contain the `λα² (A₃, A₃)` pair, so one copy
/// is subtracted to match the generator exactly.
pub fn assemble_split_form<T: Scalar>(
    corr: &CorrelationMatrix<T>,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
    h0: &ComplexDense<T>,
) -> Result<GkslGenerator<T>> {
    check_dims("assemble_split_form", spin_s, spin_a, h0)?;
    check_psd(corr)?;
    let (lam, alpha) = (corr.lam, corr.alpha);
    let ops = split_operators(lam, alpha, spin_s, spin_a);
    let [_, _, a3] = jump_operators(spin_s, spin_a);
    let mut g = GkslGenerator::new(h0.clone())?;
    g.push(dissipator(&ops.o1))?;
    g.push(dissipator(&ops.o2))?;
    g.push(dissipator(&ops.o_plus))?;
    g.push(dissipator(&ops.o_minus).scaled(-T::one()))?;
    g.push(cross_term(-lam * alpha * alpha, &a3, &a3))?;
    Ok(g)
}

/// The four operators of the split form.
#[derive(Clone, Debug)]
pub struct SplitOperators<T> {
    pub o1: ComplexDense<T>,
    pub o2: ComplexDense<T>,
    pub o_plus: ComplexDense<T>,
    pub o_minus: ComplexDense<T>,
}

pub fn split_operators<T: Scalar>(
    lam: T,
    alpha: T,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
) -> SplitOperators<T> {
    let (is, ia) = (spin_s.identity(), spin_a.identity());
    let j_s = &is + &spin_s.jz.scale_real(alpha);
    let j_a = &ia + &spin_a.jz.scale_real(alpha);
    let sl = lam.sqrt();
    let sh = (lam * T::lit(0.5)).sqrt();
    let a1 = kron(&spin_s.jz, &ia);
    let a2 = kron(&is, &spin_a.jz);
    SplitOperators {
        o1: kron(&spin_s.jz, &j_a).scale_real(sl),
        o2: kron(&j_s, &spin_a.jz).scale_real(sl),
        o_plus: (&a1 + &a2).scale_real(sh),
        o_minus: (&a1 - &a2).scale_real(sh),
    }
}

/// `((Jz)²⊗I + I⊗(Jz)²)/2`.
pub fn k_sa<T: Scalar>(spin_s: &SpinAlgebra<T>, spin_a: &SpinAlgebra<T>) -> ComplexDense<T> {
    let zs = &spin_s.jz * &spin_s.jz;
    let za = &spin_a.jz * &spin_a.jz;
    (&kron(&zs, &spin_a.identity()) + &kron(&spin_s.identity(), &za)).scale_real(T::lit(0.5))
}

/// Adds the terms generated by the plaquette's `α K_SA` noise channel, so
/// that the dissipator becomes `λ 𝕄[A₁ + A₂ + αA₃ + αK_SA]`.
pub fn add_case_study_terms<T: Scalar>(
    mut gen: GkslGenerator<T>,
    corr: &CorrelationMatrix<T>,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
) -> Result<GkslGenerator<T>> {
    let (lam, alpha) = (corr.lam, corr.alpha);
    if alpha == T::zero() {
        return Ok(gen);
    }
    let [a1, a2, a3] = jump_operators(spin_s, spin_a);
    let k = k_sa(spin_s, spin_a);
    let la = lam * alpha;
    let laa = lam * alpha * alpha;
    for (w, a) in [(la, &a1), (la, &a2), (laa, &a3)] {
        gen.push(cross_term(w, a, &k))?;
        gen.push(cross_term(w, &k, a))?;
    }
    gen.push(cross_term(laa, &k, &k))?;
    Ok(gen)
}

/// Composite generator for a system and ancilla with Hamiltonians `h_s`,
/// `h_a`, coupling `α Jz⊗Jz` and correlations `corr` (whose `alpha` is
/// the same coupling).
pub fn composite_generator<T: Scalar>(
    h_s: &ComplexDense<T>,
    h_a: &ComplexDense<T>,
    corr: &CorrelationMatrix<T>,
    spin_s: &SpinAlgebra<T>,
    spin_a: &SpinAlgebra<T>,
) -> Result<GkslGenerator<T>> {
    let h0 = build_h0(h_s, h_a, corr.alpha, spin_s.dim, spin_a.dim)?;
    Ok(assemble_generator(corr, spin_s, spin_a, &h0)?.with_bipartite(Bipartite {
        d_s: spin_s.dim,
        d_a: spin_a.dim,
        h_s: h_s.clone(),
        h_a: h_a.clone(),
        alpha: corr.alpha,
    }))
}

/// `‖L(ρS⊗Pℓ) + i[H_S + αℓ Jz, ρS]⊗Pℓ + i[I⊗H_A, ρS⊗Pℓ]‖_F`.
///
/// This is the part of the generator's action on the product state that
/// is not the closed unitary motion of the dark sector. At `α = −1/ℓ` the
/// effective Hamiltonian is `H_S − Jz` and the residual vanishes.
pub fn dark_state_residual<T: Scalar>(
    gen: &GkslGenerator<T>,
    rho_s: &ComplexDense<T>,
    ell: T,
) -> Result<T> {
    let b = gen
        .bipartite
        .as_ref()
        .ok_or_else(|| Error::InvalidState("generator carries no system/ancilla structure".into()))?;
    if rho_s.rows() != b.d_s || rho_s.cols() != b.d_s {
        return Err(Error::DimensionMismatch {
            op: "dark_state_residual",
            detail: format!("rho_s is {}x{}, system dimension {}", rho_s.rows(), rho_s.cols(), b.d_s),
        });
    }
    let spin_s = crate::spinops::make_spin::<T>(b.d_s)?;
    let spin_a = crate::spinops::make_spin::<T>(b.d_a)?;
    let p = projector(&spin_a, ell)?;
    let rho = kron(rho_s, &p);
    let i = Complex::new(T::zero(), T::one());
    let h_dark = &b.h_s + &spin_s.jz.scale_real(b.alpha * ell);
    let mut r = gen.apply(&rho);
    r += &kron(&commutator(&h_dark, rho_s), &p).scale(i);
    let ha_full = kron(&spin_s.identity(), &b.h_a);
    r += &commutator(&ha_full, &rho).scale(i);
    Ok(r.frobenius_norm())
}

/// Single-system generator `−i[H_S, ·] + λ 𝕄[Jz]`.
pub fn reduce_system<T: Scalar>(lam: T, h_s: &ComplexDense<T>) -> Result<GkslGenerator<T>> {
    if lam < T::zero() {
        return Err(invalid("lam", "must be non-negative"));
    }
    let d = h_s.require_square()?;
    let s = crate::spinops::make_spin::<T>(d)?;
    GkslGenerator::new(h_s.clone())?.with_term(dissipator(&s.jz).scaled(lam))
}

/// Ancilla prepared in a narrow mixture around the target level `ell`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedAncilla<T> {
    pub ell: T,
    pub delta: T,
    pub sigma2: T,
    /// Probability of each `Jz` eigenvalue, in ascending order.
    pub weights: Vec<T>,
}

impl<T: Scalar> MixedAncilla<T> {
    /// Centre `μ = ℓ + δ` of the Gaussian profile.
    pub fn mu(&self) -> T {
        self.ell + self.delta
    }

    /// Residual dephasing rate `λ(δ² + σ²)/ℓ²`.
    pub fn gamma_res(&self, lam: T) -> Result<T> {
        gamma_res(lam, self.ell, self.delta, self.sigma2)
    }

    /// Mean and variance of `Jz` under the realized weights.
    pub fn moments(&self) -> (T, T) {
        let d = self.weights.len();
        let j = T::lit((d as f64 - 1.0) / 2.0);
        let m = |k: usize| T::lit(k as f64) - j;
        let mean = self
            .weights
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (k, &w)| acc + w * m(k));
        let var = self
            .weights
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (k, &w)| acc + w * (m(k) - mean) * (m(k) - mean));
        (mean, var)
    }

    /// Dephasing rate the realized weights actually produce at
    /// `α = −1/ℓ`: `λ[(1 − ⟨m⟩/ℓ)² + Var(m)/ℓ²]`.
    pub fn realized_rate(&self, lam: T) -> T {
        let (mean, var) = self.moments();
        let f = T::one() - mean / self.ell;
        lam * (f * f + var / (self.ell * self.ell))
    }
}

/// `λ(δ² + σ²)/ℓ²`.
pub fn gamma_res<T: Scalar>(lam: T, ell: T, delta: T, sigma2: T) -> Result<T> {
    if ell == T::zero() {
        return Err(invalid("ell", "must be nonzero"));
    }
    Ok(lam * (delta * delta + sigma2) / (ell * ell))
}

/// Truncated discrete Gaussian over the `Jz` spectrum centred at `ℓ + δ`,
/// returned with its diagonal density matrix. With `σ² = 0` all weight sits
/// on the level nearest the centre.
pub fn mixed_ancilla_state<T: Scalar>(
    spin_a: &SpinAlgebra<T>,
    ell: T,
    delta: T,
    sigma2: T,
) -> Result<(MixedAncilla<T>, ComplexDense<T>)> {
    if sigma2 < T::zero() || !sigma2.is_finite() {
        return Err(invalid("sigma2", "must be non-negative and finite"));
    }
    spin_a
        .index_of(ell)
        .ok_or_else(|| invalid("ell", format!("{ell} is not a Jz eigenvalue")))?;
    let mu = ell + delta;
    let ms = spin_a.jz_diag();
    let mut w: Vec<T> = if sigma2 == T::zero() {
        let nearest = ms
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (*a.1 - mu)
                    .abs()
                    .partial_cmp(&(*b.1 - mu).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(k, _)| k)
            .unwrap_or(0);
        (0..ms.len()).map(|k| if k == nearest { T::one() } else { T::zero() }).collect()
    } else {
        // Shift exponents by the largest so the peak weight is exactly 1.
        let expo: Vec<T> = ms
            .iter()
            .map(|&m| -(m - mu) * (m - mu) / (T::lit(2.0) * sigma2))
            .collect();
        let top = expo.iter().copied().fold(T::neg_infinity(), T::max);
        expo.into_iter().map(|e| (e - top).exp()).collect()
    };
    let total = w.iter().fold(T::zero(), |a, &b| a + b);
    for x in &mut w {
        *x = *x / total;
    }
    let rho = ComplexDense::from_real_diag(&w);
    Ok((
        MixedAncilla {
            ell,
            delta,
            sigma2,
            weights: w,
        },
        rho,
    ))
}

/// Effective system generator `−i[H_eff, ·] + Γ_res 𝕄[Jz]` for a mixed
/// ancilla at the nominal cancellation point.
pub fn mixed_ancilla_generator<T: Scalar>(
    lam: T,
    ell: T,
    delta: T,
    sigma2: T,
    h_s: &ComplexDense<T>,
) -> Result<GkslGenerator<T>> {
    let g = gamma_res(lam, ell, delta, sigma2)?;
    if delta.abs() > T::lit(0.1) * ell.abs() || sigma2 > T::lit(0.01) * ell * ell {
        log::warn!(
            "mixed ancilla is not narrow (delta = {delta}, sigma2 = {sigma2}, ell = {ell}); the effective rate is only a leading-order estimate"
        );
    }
    let heff = build_heff(h_s)?;
    let s = crate::spinops::make_spin::<T>(h_s.rows())?;
    GkslGenerator::new(heff)?.with_term(dissipator(&s.jz).scaled(g))
}

/// Checks that `rho` is a density matrix within `tol`.
pub fn validate_density<T: Scalar>(rho: &ComplexDense<T>, tol: T) -> Result<()> {
    let n = rho.require_square()?;
    if n == 0 {
        return Err(Error::InvalidState("empty density matrix".into()));
    }
    if rho.entries().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidState("non-finite entries".into()));
    }
    if !rho.is_hermitian(tol) {
        return Err(Error::InvalidState("density matrix is not Hermitian".into()));
    }
    let tr = rho.trace();
    if (tr.re - T::one()).abs() > tol || tr.im.abs() > tol {
        return Err(Error::InvalidState(format!("trace is {} + {}i", tr.re, tr.im)));
    }
    let min = min_eigenvalue(rho)?;
    if min < -tol {
        return Err(Error::InvalidState(format!("smallest eigenvalue {min}")));
    }
    Ok(())
}

fn check_drift<T: Scalar>(rho: &ComplexDense<T>, t: T, full: bool) -> Result<()> {
    let tol = T::tol(DRIFT_TOL);
    let tr = rho.trace();
    if (tr.re - T::one()).abs() > tol || tr.im.abs() > tol {
        return Err(Error::Drift(format!("trace {} + {}i at t = {t}", tr.re, tr.im)));
    }
    if !rho.is_hermitian(tol) {
        return Err(Error::Drift(format!("Hermiticity lost at t = {t}")));
    }
    if full {
        let min = min_eigenvalue(rho)?;
        if min < -tol {
            return Err(Error::Drift(format!("smallest eigenvalue {min} at t = {t}")));
        }
    }
    Ok(())
}

/// Uniform grids are detected to this relative spacing tolerance.
const GRID_TOL: f64 = 1e-12;

fn uniform_step<T: Scalar>(times: &[T]) -> Option<T> {
    if times.len() < 2 {
        return None;
    }
    let h = times[1] - times[0];
    if !(h > T::zero()) {
        return None;
    }
    let tol = T::tol(GRID_TOL) * times.last().copied().unwrap_or(h).abs().max(h);
    times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= tol)
        .then_some(h)
}

/// `ρ(t) = e^{tL} ρ₀` at each requested time (non-negative, any order).
///
/// Only the invariant components of the superoperator that `ρ₀` touches
/// are propagated. Components up to [`DENSE_BLOCK_MAX`] are exponentiated
/// densely, reusing the one-step propagator on uniform grids; larger ones
/// are integrated with adaptive Dormand–Prince.
pub fn propagate<T: Scalar>(
    gen: &GkslGenerator<T>,
    rho0: &ComplexDense<T>,
    times: &[T],
) -> Result<Vec<ComplexDense<T>>> {
    let n = gen.dim;
    if rho0.rows() != n || rho0.cols() != n {
        return Err(Error::DimensionMismatch {
            op: "propagate",
            detail: format!("rho0 is {}x{}, generator dimension {n}", rho0.rows(), rho0.cols()),
        });
    }
    validate_density(rho0, T::tol(INPUT_TOL))?;
    if let Some(t) = times.iter().find(|t| !(**t >= T::zero()) || !t.is_finite()) {
        return Err(invalid("times", format!("must be finite and non-negative, got {t}")));
    }
    let v0 = vectorize(rho0);
    let v0 = v0.entries();
    let mut out = vec![vec![Complex::<T>::zero(); n * n]; times.len()];
    let mut rk_needed = false;
    for comp in gen.components() {
        if comp.iter().all(|&p| v0[p].is_zero()) {
            continue;
        }
        if comp.len() > DENSE_BLOCK_MAX {
            rk_needed = true;
            continue;
        }
        let b = gen.block(comp);
        let x0: Vec<Complex<T>> = comp.iter().map(|&p| v0[p]).collect();
        let xs = propagate_block(&b, &x0, times)?;
        for (slot, x) in out.iter_mut().zip(xs) {
            for (&p, v) in comp.iter().zip(x) {
                slot[p] = v;
            }
        }
    }
    if rk_needed {
        let big: Vec<&Vec<usize>> = gen
            .components()
            .iter()
            .filter(|c| c.len() > DENSE_BLOCK_MAX && c.iter().any(|&p| !v0[p].is_zero()))
            .collect();
        let mut start = vec![Complex::zero(); n * n];
        for c in &big {
            for &p in c.iter() {
                start[p] = v0[p];
            }
        }
        let start = devectorize_slice(&start, n, n)?;
        let xs = dormand_prince(gen, &start, times)?;
        for (slot, x) in out.iter_mut().zip(xs) {
            let xv = vectorize(&x);
            for c in &big {
                for &p in c.iter() {
                    slot[p] = xv.entries()[p];
                }
            }
        }
    }
    let full_check = n <= 16;
    let mut result = Vec::with_capacity(times.len());
    for (k, (v, &t)) in out.iter().zip(times).enumerate() {
        let rho = devectorize_slice(v, n, n)?;
        check_drift(&rho, t, full_check || k + 1 == times.len())?;
        result.push(rho);
    }
    Ok(result)
}

/// Streams `ρ(k·dt)` for `k = 0..=n_steps` to `visit` without storing the
/// trajectory; `visit` may stop early with `ControlFlow::Break`. Every
/// touched component must fit the dense block limit.
pub fn propagate_uniform<T: Scalar>(
    gen: &GkslGenerator<T>,
    rho0: &ComplexDense<T>,
    dt: T,
    n_steps: usize,
    mut visit: impl FnMut(usize, &ComplexDense<T>) -> Result<ControlFlow<()>>,
) -> Result<()> {
    let n = gen.dim;
    if rho0.rows() != n || rho0.cols() != n {
        return Err(Error::DimensionMismatch {
            op: "propagate_uniform",
            detail: format!("rho0 is {}x{}, generator dimension {n}", rho0.rows(), rho0.cols()),
        });
    }
    validate_density(rho0, T::tol(INPUT_TOL))?;
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(invalid("dt", "must be positive and finite"));
    }
    let v0 = vectorize(rho0);
    let v0 = v0.entries();
    let mut blocks = Vec::new();
    for comp in gen.components() {
        if comp.iter().all(|&p| v0[p].is_zero()) {
            continue;
        }
        if comp.len() > DENSE_BLOCK_MAX {
            return Err(invalid(
                "rho0",
                format!("touches a component of size {} above the dense limit", comp.len()),
            ));
        }
        let step = expm_pade(&gen.block(comp).scale_real(dt))?;
        let x: Vec<Complex<T>> = comp.iter().map(|&p| v0[p]).collect();
        blocks.push((comp, step, x));
    }
    let mut flat = vec![Complex::<T>::zero(); n * n];
    let mut scratch = Vec::new();
    for k in 0..=n_steps {
        if k > 0 {
            for (_, step, x) in blocks.iter_mut() {
                scratch.resize(x.len(), Complex::zero());
                step.matvec_into(x, &mut scratch);
                std::mem::swap(x, &mut scratch);
            }
        }
        for (comp, _, x) in &blocks {
            for (&p, v) in comp.iter().zip(x.iter()) {
                flat[p] = *v;
            }
        }
        let rho = devectorize_slice(&flat, n, n)?;
        check_drift(&rho, dt * T::lit(k as f64), k == n_steps && n <= 128)?;
        if visit(k, &rho)?.is_break() {
            break;
        }
    }
    Ok(())
}

fn propagate_block<T: Scalar>(
    b: &ComplexDense<T>,
    x0: &[Complex<T>],
    times: &[T],
) -> Result<Vec<Vec<Complex<T>>>> {
    if let Some(h) = uniform_step(times) {
        let first = expm_pade(&b.scale_real(times[0]))?.matvec(x0);
        let step = expm_pade(&b.scale_real(h))?;
        let mut xs = Vec::with_capacity(times.len());
        let mut x = first;
        for k in 0..times.len() {
            if k > 0 {
                x = step.matvec(&x);
            }
            xs.push(x.clone());
        }
        Ok(xs)
    } else {
        times
            .iter()
            .map(|&t| Ok(expm_pade(&b.scale_real(t))?.matvec(x0)))
            .collect()
    }
}

const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const RK_RTOL: f64 = 1e-10;
const RK_ATOL: f64 = 1e-12;

/// Adaptive Dormand–Prince 5(4) integration of `dρ/dt = Lρ`.
pub fn dormand_prince<T: Scalar>(
    gen: &GkslGenerator<T>,
    rho0: &ComplexDense<T>,
    times: &[T],
) -> Result<Vec<ComplexDense<T>>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![ComplexDense::zeros(0, 0); times.len()];
    let mut t = T::zero();
    let mut y = rho0.clone();
    let mut h = T::lit(1e-3);
    let lit = |x: f64| T::lit(x);
    for &idx in &order {
        let target = times[idx];
        while t < target {
            let step = h.min(target - t);
            let k1 = gen.apply(&y);
            let mut ks = vec![k1];
            for row in DP_A.iter() {
                let mut yi = y.clone();
                for (c, k) in row.iter().zip(&ks) {
                    if *c != 0.0 {
                        yi += &k.scale_real(step * lit(*c));
                    }
                }
                ks.push(gen.apply(&yi));
                if ks.len() == 7 {
                    break;
                }
            }
            // The last stage is evaluated at the 5th-order solution (FSAL).
            let mut y5 = y.clone();
            for (c, k) in DP_A[5].iter().zip(&ks) {
                if *c != 0.0 {
                    y5 += &k.scale_real(step * lit(*c));
                }
            }
            let mut err = ComplexDense::zeros(y.rows(), y.cols());
            for (e, k) in DP_E.iter().zip(&ks) {
                if *e != 0.0 {
                    err += &k.scale_real(step * lit(*e));
                }
            }
            let scale = T::tol(RK_ATOL) + T::tol(RK_RTOL) * y.max_abs().max(y5.max_abs());
            let ratio = err.max_abs() / scale;
            if ratio <= T::one() {
                t = t + step;
                y = y5;
            }
            let factor = if ratio.is_zero() {
                lit(5.0)
            } else {
                (lit(0.9) * ratio.powf(lit(-0.2))).max(lit(0.2)).min(lit(5.0))
            };
            h = step * factor;
            if h < T::epsilon() * lit(64.0) * (T::one() + t.abs()) {
                return Err(Error::Drift(format!("step size underflow at t = {t}")));
            }
        }
        out[idx] = y.clone();
    }
    Ok(out)
}

//! Stochastic Schrödinger trajectories under classical Hamiltonian noise and
//! their ensemble average.
//!
//! Each step is a Strang splitting: half a step of `H₀`, the exact noise
//! phase `exp(−i Σ_k I_k A_k)`, then another half step of `H₀`. The jump
//! operators are diagonal in the product `Jz` basis, so the noise factor is
//! an elementwise phase and evaluates the Stratonovich solution exactly.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lindblad::{propagate, GkslGenerator};
use crate::matrixcore::{
    partial_trace_ancilla, trace_distance, unitary_propagator, vector_norm, ComplexDense,
};
use crate::noise::{derive_seed, NoiseModel, NoiseStream};
use crate::scalar::Scalar;

/// Largest tolerated deviation of an input state's norm from one.
pub const INPUT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig<T> {
    pub dt: T,
    pub t_final: T,
    pub n_traj: usize,
    pub master_seed: u64,
    pub record_stride: usize,
}

impl<T: Scalar> TrajectoryConfig<T> {
    pub fn new(dt: T, t_final: T, n_traj: usize, master_seed: u64, record_stride: usize) -> Result<Self> {
        let c = Self {
            dt,
            t_final,
            n_traj,
            master_seed,
            record_stride,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(invalid("dt", "must be positive and finite"));
        }
        if !(self.t_final >= self.dt) || !self.t_final.is_finite() {
            return Err(invalid("t_final", "must be finite and at least dt"));
        }
        if self.n_traj == 0 {
            return Err(invalid("n_traj", "must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of integration steps, `round(t_final / dt)`.
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round().to_usize().unwrap_or(0)
    }

    /// Recorded times `k · record_stride · dt`, always including `t = 0`.
    pub fn record_times(&self) -> Vec<T> {
        let n = self.n_steps();
        (0..=n)
            .step_by(self.record_stride)
            .map(|k| T::lit(k as f64) * self.dt)
            .collect()
    }
}

/// Diagonals of the three commuting jump operators.
#[derive(Clone, Debug)]
pub struct DiagonalJumps<T> {
    pub diags: [Vec<T>; 3],
}

impl<T: Scalar> DiagonalJumps<T> {
    pub fn from_operators(ops: &[ComplexDense<T>; 3]) -> Result<Self> {
        let n = ops[0].rows();
        let mut diags: [Vec<T>; 3] = Default::default();
        for (k, op) in ops.iter().enumerate() {
            if op.rows() != n || !op.is_diagonal() {
                return Err(invalid(
                    "jump_ops",
                    "must be diagonal operators of one common dimension",
                ));
            }
            let d = op.diag();
            if d.iter().any(|z| z.im != T::zero()) {
                return Err(invalid("jump_ops", "must be real diagonal (Hermitian)"));
            }
            diags[k] = d.into_iter().map(|z| z.re).collect();
        }
        Ok(Self { diags })
    }

    pub fn dim(&self) -> usize {
        self.diags[0].len()
    }
}

/// Precomputed half-step propagator `exp(−i H₀ dt/2)`.
#[derive(Clone, Debug)]
pub struct HalfStep<T> {
    pub u: ComplexDense<T>,
}

impl<T: Scalar> HalfStep<T> {
    pub fn new(h0: &ComplexDense<T>, dt: T) -> Result<Self> {
        Ok(Self {
            u: unitary_propagator(h0, dt * T::lit(0.5))?,
        })
    }
}

/// One Strang step. Returns the norm deviation from one measured before
/// renormalizing.
pub fn step<T: Scalar>(
    psi: &mut [Complex<T>],
    half: &HalfStep<T>,
    increment: [T; 3],
    jumps: &DiagonalJumps<T>,
) -> Result<T> {
    let n = jumps.dim();
    if psi.len() != n || half.u.rows() != n {
        return Err(Error::DimensionMismatch {
            op: "step",
            detail: format!("state {} vs operators {n}", psi.len()),
        });
    }
    let norm0 = vector_norm(psi);
    if (norm0 - T::one()).abs() > T::lit(INPUT_NORM_TOL) {
        return Err(Error::InvalidState(format!("state norm {norm0} is not 1")));
    }
    let mut tmp = half.u.matvec(psi);
    for (k, z) in tmp.iter_mut().enumerate() {
        let phase = increment[0] * jumps.diags[0][k]
            + increment[1] * jumps.diags[1][k]
            + increment[2] * jumps.diags[2][k];
        *z = *z * Complex::new(T::zero(), -phase).exp();
    }
    half.u.matvec_into(&tmp, psi);
    let norm = vector_norm(psi);
    let inv = T::one() / norm;
    for z in psi.iter_mut() {
        *z = *z * inv;
    }
    Ok(norm - T::one())
}

/// Integrates one trajectory along an explicit noise path, recording the
/// state every `record_stride` steps (including `t = 0`).
pub fn run_with_increments<T: Scalar>(
    config: &TrajectoryConfig<T>,
    h0: &ComplexDense<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
    mut next_increment: impl FnMut() -> [T; 3],
) -> Result<Vec<Vec<Complex<T>>>> {
    config.validate()?;
    let half = HalfStep::new(h0, config.dt)?;
    run_prepared(config, &half, jumps, psi0, &mut next_increment)
}

fn run_prepared<T: Scalar>(
    config: &TrajectoryConfig<T>,
    half: &HalfStep<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
    next_increment: &mut dyn FnMut() -> [T; 3],
) -> Result<Vec<Vec<Complex<T>>>> {
    let n0 = vector_norm(psi0);
    if (n0 - T::one()).abs() > T::lit(INPUT_NORM_TOL) {
        return Err(Error::InvalidState(format!("initial state norm {n0} is not 1")));
    }
    let mut psi = psi0.to_vec();
    let n_steps = config.n_steps();
    let mut out = Vec::with_capacity(n_steps / config.record_stride + 1);
    out.push(psi.clone());
    let mut worst = T::zero();
    for k in 1..=n_steps {
        let drift = step(&mut psi, half, next_increment(), jumps)?;
        worst = worst.max(drift.abs());
        if k % config.record_stride == 0 {
            out.push(psi.clone());
        }
    }
    if worst > T::tol(1e-12) {
        log::debug!("largest per-step norm drift before renormalization: {:e}", worst.to_f64().unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// One noisy trajectory. The noise stream seed is derived from
/// `(master_seed, traj_index)`, so the result depends on nothing else.
pub fn run_trajectory<T: Scalar>(
    config: &TrajectoryConfig<T>,
    model: &NoiseModel<T>,
    h0: &ComplexDense<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
    traj_index: u64,
) -> Result<Vec<Vec<Complex<T>>>> {
    config.validate()?;
    let half = HalfStep::new(h0, config.dt)?;
    trajectory_prepared(config, model, &half, jumps, psi0, traj_index)
}

fn trajectory_prepared<T: Scalar>(
    config: &TrajectoryConfig<T>,
    model: &NoiseModel<T>,
    half: &HalfStep<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
    traj_index: u64,
) -> Result<Vec<Vec<Complex<T>>>> {
    let seed = derive_seed(config.master_seed, traj_index, 0);
    let mut stream = NoiseStream::new(model, config.dt, seed)?;
    run_prepared(config, half, jumps, psi0, &mut || stream.next_increment())
}

/// Ensemble-averaged density matrices on the recorded grid.
#[derive(Clone, Debug)]
pub struct EnsembleResult<T> {
    pub times: Vec<T>,
    pub rho_avg: Vec<ComplexDense<T>>,
    pub n_traj_used: usize,
}

impl<T: Scalar> EnsembleResult<T> {
    /// Partial trace over the ancilla at every grid point.
    pub fn reduced(&self, d_s: usize, d_a: usize) -> Result<Self> {
        Ok(Self {
            times: self.times.clone(),
            rho_avg: self
                .rho_avg
                .iter()
                .map(|r| partial_trace_ancilla(r, d_s, d_a))
                .collect::<Result<_>>()?,
            n_traj_used: self.n_traj_used,
        })
    }
}

fn projector_sums<T: Scalar>(states: &[Vec<Complex<T>>]) -> Vec<ComplexDense<T>> {
    states
        .iter()
        .map(|psi| {
            let n = psi.len();
            ComplexDense::from_fn(n, n, |i, j| psi[i] * psi[j].conj())
        })
        .collect()
}

fn add_into<T: Scalar>(acc: &mut [ComplexDense<T>], other: &[ComplexDense<T>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Sum of projectors over trajectories `lo..hi`, reduced as a balanced
/// binary tree whose shape depends only on the index range. The result is
/// therefore bit-identical for any thread schedule.
fn tree_sum<T: Scalar>(
    lo: u64,
    hi: u64,
    f: &(dyn Fn(u64) -> Result<Vec<Vec<Complex<T>>>> + Sync),
) -> Result<Vec<ComplexDense<T>>> {
    if hi - lo == 1 {
        return Ok(projector_sums(&f(lo)?));
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = rayon::join(|| tree_sum(lo, mid, f), || tree_sum(mid, hi, f));
    let mut a = a?;
    add_into(&mut a, &b?);
    Ok(a)
}

/// Mean of `|ψ⟩⟨ψ|` over trajectories `first..first + config.n_traj`.
pub fn ensemble_density_range<T: Scalar>(
    config: &TrajectoryConfig<T>,
    model: &NoiseModel<T>,
    h0: &ComplexDense<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
    first: u64,
) -> Result<EnsembleResult<T>> {
    config.validate()?;
    let half = HalfStep::new(h0, config.dt)?;
    let run = |k: u64| trajectory_prepared(config, model, &half, jumps, psi0, k);
    let sums = tree_sum(first, first + config.n_traj as u64, &run)?;
    let inv = T::one() / T::lit(config.n_traj as f64);
    Ok(EnsembleResult {
        times: config.record_times(),
        rho_avg: sums.into_iter().map(|s| s.scale_real(inv)).collect(),
        n_traj_used: config.n_traj,
    })
}

/// Mean of `|ψ⟩⟨ψ|` over `config.n_traj` trajectories.
pub fn ensemble_density<T: Scalar>(
    config: &TrajectoryConfig<T>,
    model: &NoiseModel<T>,
    h0: &ComplexDense<T>,
    jumps: &DiagonalJumps<T>,
    psi0: &[Complex<T>],
) -> Result<EnsembleResult<T>> {
    ensemble_density_range(config, model, h0, jumps, psi0, 0)
}

/// Trace distances between an ensemble and the master-equation solution on
/// the same grid, started from the ensemble's initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterComparison<T> {
    pub times: Vec<T>,
    pub distances: Vec<T>,
    pub max_distance: T,
}

pub fn compare_to_master<T: Scalar>(
    ens: &EnsembleResult<T>,
    gen: &GkslGenerator<T>,
) -> Result<MasterComparison<T>> {
    let rho0 = ens
        .rho_avg
        .first()
        .ok_or_else(|| Error::InvalidState("empty ensemble".into()))?;
    if rho0.rows() != gen.dim {
        return Err(Error::DimensionMismatch {
            op: "compare_to_master",
            detail: format!("ensemble dimension {} vs generator {}", rho0.rows(), gen.dim),
        });
    }
    let master = propagate(gen, rho0, &ens.times)?;
    let distances = ens
        .rho_avg
        .iter()
        .zip(&master)
        .map(|(a, b)| trace_distance(a, b))
        .collect::<Result<Vec<T>>>()?;
    let max_distance = distances.iter().copied().fold(T::zero(), T::max);
    Ok(MasterComparison {
        times: ens.times.clone(),
        distances,
        max_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{jump_operators, reduce_system};
    use crate::matrixcore::{expm, inner, kron};
    use crate::noise::{build_correlation, NoiseKind};
    use crate::spinops::{build_h0, build_ha, build_heff, build_hs, make_spin, noon_state, SystemParams};
    use crate::testutil::{random_complex, random_hermitian, rng};
    use crate::C64;

    type M = ComplexDense<f64>;

    fn random_state(seed: u64, n: usize) -> Vec<C64> {
        let mut r = rng(seed);
        let v = random_complex(&mut r, n, 1).into_entries();
        let nrm = vector_norm(&v);
        v.into_iter().map(|z| z / nrm).collect()
    }

    fn qubit_pair(alpha: f64) -> (M, DiagonalJumps<f64>) {
        let s = make_spin::<f64>(2).unwrap();
        let hs = build_hs(&SystemParams::new(0.0, 0.5, -1.0, 1)).unwrap();
        let ha = build_ha(&SystemParams::new(0.0, 0.0, -1.0, 1)).unwrap();
        let h0 = build_h0(&hs, &ha, alpha, 2, 2).unwrap();
        (h0, DiagonalJumps::from_operators(&jump_operators(&s, &s)).unwrap())
    }

    #[test]
    fn quiet_step_is_identity_for_zero_hamiltonian() {
        let (_, jumps) = qubit_pair(0.0);
        let half = HalfStep::new(&M::zeros(4, 4), 0.01).unwrap();
        let psi0 = random_state(1, 4);
        let mut psi = psi0.clone();
        step(&mut psi, &half, [0.0; 3], &jumps).unwrap();
        for (a, b) in psi.iter().zip(&psi0) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn quiet_step_matches_exponential() {
        let (_, jumps) = qubit_pair(0.0);
        let mut r = rng(2);
        let h0 = random_hermitian(&mut r, 4);
        let psi0 = random_state(3, 4);
        for dt in [0.1, 0.05] {
            let half = HalfStep::new(&h0, dt).unwrap();
            let mut psi = psi0.clone();
            step(&mut psi, &half, [0.0; 3], &jumps).unwrap();
            let want = expm(&h0.scale(C64::new(0.0, -dt))).unwrap().matvec(&psi0);
            let err = psi.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-13, "dt={dt} err={err}");
        }
    }

    #[test]
    fn noise_phase_preserves_populations() {
        let s = make_spin::<f64>(2).unwrap();
        let z = M::zeros(2, 2);
        let jumps = DiagonalJumps::from_operators(&[s.jz.clone(), z.clone(), z.clone()]).unwrap();
        let half = HalfStep::new(&M::zeros(2, 2), 0.1).unwrap();
        let mut psi = random_state(4, 2);
        let p0 = psi[0].norm();
        step(&mut psi, &half, [0.37, 0.0, 0.0], &jumps).unwrap();
        assert!((psi[0].norm() - p0).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_unnormalized() {
        let (h0, jumps) = qubit_pair(0.0);
        let half = HalfStep::new(&h0, 0.1).unwrap();
        let mut psi = vec![C64::new(1.0, 0.0); 4];
        assert!(step(&mut psi, &half, [0.0; 3], &jumps).is_err());
        let bad = [M::identity(4), M::identity(4), random_complex(&mut rng(1), 4, 4)];
        assert!(DiagonalJumps::from_operators(&bad).is_err());
    }

    #[test]
    fn strang_order_without_noise() {
        let (_, jumps) = qubit_pair(0.0);
        let mut r = rng(5);
        let h0 = random_hermitian(&mut r, 4);
        let psi0 = random_state(6, 4);
        let t = 1.0;
        let drift = |dt: f64| {
            let cfg = TrajectoryConfig::new(dt, t, 1, 0, 1).unwrap();
            let path = run_with_increments(&cfg, &h0, &jumps, &psi0, || [0.8 * dt, -0.3 * dt, 0.5 * dt]).unwrap();
            path.last().unwrap().clone()
        };
        let reference = drift(1e-4);
        let e = |dt: f64| {
            drift(dt)
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let ratio = e(0.02) / e(0.01);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_noise_matches_schrodinger() {
        let (h0, jumps) = qubit_pair(0.7);
        let psi0 = random_state(7, 4);
        let cfg = TrajectoryConfig::new(1e-3, 5.0, 1, 3, 5000).unwrap();
        let tiny = NoiseModel::white(1e-30, 0.7).unwrap();
        let path = run_trajectory(&cfg, &tiny, &h0, &jumps, &psi0, 0).unwrap();
        let want = unitary_propagator(&h0, 5.0).unwrap().matvec(&psi0);
        let f = inner(path.last().unwrap(), &want).norm_sqr();
        assert!(f >= 1.0 - 1e-8);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let (h0, jumps) = qubit_pair(0.3);
        let psi0 = random_state(8, 4);
        let cfg = TrajectoryConfig::new(1e-2, 2.0, 1, 11, 10).unwrap();
        let model = NoiseModel::white(0.1, 0.3).unwrap();
        let a = run_trajectory(&cfg, &model, &h0, &jumps, &psi0, 5).unwrap();
        let b = run_trajectory(&cfg, &model, &h0, &jumps, &psi0, 5).unwrap();
        let c = run_trajectory(&cfg, &model, &h0, &jumps, &psi0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dark_trajectories_only_pick_up_a_phase() {
        for (n, ell) in [(1usize, 0.5f64), (3, -0.5), (2, 1.0)] {
            let d = n + 1;
            let alpha = -1.0 / ell;
            let s = make_spin::<f64>(d).unwrap();
            let hs = build_hs(&SystemParams::new(1.0, 0.5, -1.0, n)).unwrap();
            let ha = build_ha(&SystemParams::new(0.0, 0.0, -1.0, n)).unwrap();
            let h0 = build_h0(&hs, &ha, alpha, d, d).unwrap();
            let jumps = DiagonalJumps::from_operators(&jump_operators(&s, &s)).unwrap();
            let noon = noon_state::<f64>(n, 1).unwrap();
            let k = s.index_of(ell).unwrap();
            let mut anc = vec![C64::new(0.0, 0.0); d];
            anc[k] = C64::new(1.0, 0.0);
            let psi0 = kron(&noon, &M::column(&anc)).into_entries();
            let heff = build_heff(&hs).unwrap();
            let want_s = unitary_propagator(&heff, 10.0).unwrap().matvec(noon.entries());
            let want = kron(&M::column(&want_s), &M::column(&anc)).into_entries();
            let cfg = TrajectoryConfig::new(1e-3, 10.0, 1, 99, 10_000).unwrap();
            let model = NoiseModel::white(0.1, alpha).unwrap();
            for traj in 0..8 {
                let path = run_trajectory(&cfg, &model, &h0, &jumps, &psi0, traj).unwrap();
                let f = inner(path.last().unwrap(), &want).norm_sqr();
                assert!(f >= 1.0 - 1e-6, "n={n} traj={traj} f={f}");
            }
        }
    }

    #[test]
    fn single_trajectory_ensemble_is_projector_path() {
        let (h0, jumps) = qubit_pair(0.0);
        let psi0 = random_state(9, 4);
        let cfg = TrajectoryConfig::new(1e-2, 1.0, 1, 4, 25).unwrap();
        let model = NoiseModel::white(0.1, 0.0).unwrap();
        let ens = ensemble_density(&cfg, &model, &h0, &jumps, &psi0).unwrap();
        let path = run_trajectory(&cfg, &model, &h0, &jumps, &psi0, 0).unwrap();
        assert_eq!(ens.times.len(), path.len());
        for (rho, psi) in ens.rho_avg.iter().zip(&path) {
            let p = ComplexDense::from_fn(4, 4, |i, j| psi[i] * psi[j].conj());
            assert_eq!(rho, &p);
        }
    }

    #[test]
    fn ensemble_is_schedule_independent() {
        let (h0, jumps) = qubit_pair(0.5);
        let psi0 = random_state(10, 4);
        let cfg = TrajectoryConfig::new(1e-2, 1.0, 37, 4, 20).unwrap();
        let model = NoiseModel::white(0.2, 0.5).unwrap();
        let a = ensemble_density(&cfg, &model, &h0, &jumps, &psi0).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| ensemble_density(&cfg, &model, &h0, &jumps, &psi0).unwrap());
        assert_eq!(a.rho_avg, b.rho_avg);
        for rho in &a.rho_avg {
            assert!((rho.trace().re - 1.0).abs() <= 1e-10);
            assert!(crate::matrixcore::min_eigenvalue(rho).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn compare_to_own_master_solution_is_zero() {
        let hs = build_hs(&SystemParams::new(0.0, 0.5, -1.0, 1)).unwrap();
        let gen = reduce_system(0.1, &hs).unwrap();
        let rho0 = M::from_real(2, 2, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let times: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let ens = EnsembleResult {
            times: times.clone(),
            rho_avg: propagate(&gen, &rho0, &times).unwrap(),
            n_traj_used: 1,
        };
        let cmp = compare_to_master(&ens, &gen).unwrap();
        assert!(cmp.max_distance < 1e-12);
    }

    #[test]
    fn colored_noise_departs_from_white_master() {
        let hs = build_hs(&SystemParams::new(0.0, 0.0, 0.0, 1)).unwrap();
        let lam = 0.5;
        let s = make_spin::<f64>(2).unwrap();
        let z = M::zeros(2, 2);
        let jumps = DiagonalJumps::from_operators(&[s.jz.clone(), z.clone(), z]).unwrap();
        let psi0 = noon_state::<f64>(1, 1).unwrap().into_entries();
        let cfg = TrajectoryConfig::new(1e-3, 5.0, 1000, 21, 1000).unwrap();
        let gen = reduce_system(lam, &hs).unwrap();
        let ou = NoiseModel::new(NoiseKind::Ou { tau_c: 5.0 }, build_correlation(lam, 0.0).unwrap()).unwrap();
        let white = NoiseModel::white(lam, 0.0).unwrap();
        let d_ou = compare_to_master(&ensemble_density(&cfg, &ou, &hs, &jumps, &psi0).unwrap(), &gen).unwrap();
        let d_w = compare_to_master(&ensemble_density(&cfg, &white, &hs, &jumps, &psi0).unwrap(), &gen).unwrap();
        let band = 3.0 / (cfg.n_traj as f64).sqrt() + 10.0 * cfg.dt;
        assert!(d_w.distances.last().unwrap() <= &band);
        assert!(d_ou.distances.last().unwrap() > &band, "{:?}", d_ou.distances.last());
    }
}

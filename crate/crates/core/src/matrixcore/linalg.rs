use num_complex::Complex;
use num_traits::Zero;

use super::dense::ComplexDense;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// LU factorization with partial (row) pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    lu: ComplexDense<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &ComplexDense<T>) -> Result<Self> {
        let n = a.require_square()?;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        let tiny = scale * T::epsilon() * T::lit(1e-3);
        for k in 0..n {
            let (piv, pmag) = (k..n)
                .map(|i| (i, lu[(i, k)].norm()))
                .fold((k, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmag > tiny) || pmag.is_zero() {
                return Err(Error::Singular);
            }
            if piv != k {
                perm.swap(piv, k);
                let d = lu.entries_mut();
                for j in 0..n {
                    d.swap(k * n + j, piv * n + j);
                }
            }
            let inv = lu[(k, k)].inv();
            for i in (k + 1)..n {
                let f = lu[(i, k)] * inv;
                lu[(i, k)] = f;
                if f.is_zero() {
                    continue;
                }
                let d = lu.entries_mut();
                for j in (k + 1)..n {
                    let u = d[k * n + j];
                    d[i * n + j] = d[i * n + j] - f * u;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    /// Solves `A X = B` for every column of `b`.
    pub fn solve(&self, b: &ComplexDense<T>) -> Result<ComplexDense<T>> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::DimensionMismatch {
                op: "lu solve",
                detail: format!("rhs has {} rows, system has {n}", b.rows()),
            });
        }
        let m = b.cols();
        let mut x = ComplexDense::from_fn(n, m, |i, j| b[(self.perm[i], j)]);
        let lu = self.lu.entries();
        let xd = x.entries_mut();
        for i in 0..n {
            for k in 0..i {
                let l = lu[i * n + k];
                if l.is_zero() {
                    continue;
                }
                for j in 0..m {
                    let v = xd[k * m + j];
                    xd[i * m + j] = xd[i * m + j] - l * v;
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = lu[i * n + k];
                if u.is_zero() {
                    continue;
                }
                for j in 0..m {
                    let v = xd[k * m + j];
                    xd[i * m + j] = xd[i * m + j] - u * v;
                }
            }
            let inv = lu[i * n + i].inv();
            for j in 0..m {
                xd[i * m + j] = xd[i * m + j] * inv;
            }
        }
        Ok(x)
    }
}

pub fn solve<T: Scalar>(a: &ComplexDense<T>, b: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    Lu::factor(a)?.solve(b)
}

pub fn inverse<T: Scalar>(a: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    let n = a.require_square()?;
    Lu::factor(a)?.solve(&ComplexDense::identity(n))
}

/// Eigen-decomposition of a Hermitian matrix: `A = V diag(values) V†`,
/// eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct Eigh<T> {
    pub values: Vec<T>,
    pub vectors: ComplexDense<T>,
}

impl<T: Scalar> Eigh<T> {
    /// `V diag(f(λ)) V†`.
    pub fn map(&self, f: impl Fn(T) -> Complex<T>) -> ComplexDense<T> {
        let n = self.values.len();
        let fv: Vec<Complex<T>> = self.values.iter().map(|&w| f(w)).collect();
        let v = &self.vectors;
        let mut out = ComplexDense::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex::zero();
                for (k, &f) in fv.iter().enumerate() {
                    acc = acc + v[(i, k)] * f * v[(j, k)].conj();
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn vector(&self, k: usize) -> Vec<Complex<T>> {
        (0..self.vectors.rows()).map(|i| self.vectors[(i, k)]).collect()
    }
}

const MAX_SWEEPS: usize = 100;

/// Hermitian eigensolver (cyclic complex Jacobi). Only the Hermitian part of
/// the input is used.
pub fn eigh<T: Scalar>(a: &ComplexDense<T>) -> Result<Eigh<T>> {
    let n = a.require_square()?;
    let mut m = a.hermitian_part();
    let mut v = ComplexDense::<T>::identity(n);
    let total = m.frobenius_norm();
    let tol = T::epsilon() * total;
    let half = T::lit(0.5);

    for _ in 0..MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .fold(T::zero(), |acc, (i, j)| acc + m[(i, j)].norm_sqr())
            .sqrt();
        if off <= tol || total.is_zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let r = apq.norm();
                if r <= T::min_positive_value() || r <= tol * T::lit(1e-3) {
                    continue;
                }
                let d = (apq / r).conj();
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let theta = (aqq - app) * half / r;
                let t = if theta.is_zero() {
                    T::one()
                } else {
                    theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                let (cc, sc) = (Complex::new(c, T::zero()), Complex::new(s, T::zero()));

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = cc * mkp - sc * d * mkq;
                    m[(k, q)] = sc * mkp + cc * d * mkq;
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cc * vkp - sc * d * vkq;
                    v[(k, q)] = sc * vkp + cc * d * vkq;
                }
                let dc = d.conj();
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = cc * mpk - sc * dc * mqk;
                    m[(q, k)] = sc * mpk + cc * dc * mqk;
                }
                m[(p, q)] = Complex::zero();
                m[(q, p)] = Complex::zero();
                m[(p, p)] = Complex::new(m[(p, p)].re, T::zero());
                m[(q, q)] = Complex::new(m[(q, q)].re, T::zero());
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.partial_cmp(&m[(j, j)].re).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = ComplexDense::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(Eigh { values, vectors })
}

pub fn eigvalsh<T: Scalar>(a: &ComplexDense<T>) -> Result<Vec<T>> {
    Ok(eigh(a)?.values)
}

pub fn min_eigenvalue<T: Scalar>(a: &ComplexDense<T>) -> Result<T> {
    Ok(eigvalsh(a)?.first().copied().unwrap_or_else(T::zero))
}

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest dimension for which structured inputs go through the
/// eigen-decomposition instead of Padé.
const EIGEN_ROUTE_MAX_DIM: usize = 128;

/// Matrix exponential.
///
/// Hermitian and skew-Hermitian inputs of moderate size are exponentiated
/// through their eigen-decomposition, which keeps unitaries unitary to
/// rounding. Everything else goes through [`expm_pade`].
pub fn expm<T: Scalar>(a: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    let n = a.require_square()?;
    if n == 0 {
        return Ok(a.clone());
    }
    if n <= EIGEN_ROUTE_MAX_DIM && !a.is_diagonal() {
        let tol = T::lit(1e-13) * (T::one() + a.max_abs());
        if a.is_hermitian(tol) {
            return Ok(eigh(a)?.map(|w| Complex::new(w.exp(), T::zero())));
        }
        let ia = a.scale(Complex::i());
        if ia.is_hermitian(tol) {
            // a = -i (i a), so e^a = V e^{-i w} V†.
            return Ok(eigh(&ia)?.map(|w| Complex::new(T::zero(), -w).exp()));
        }
    }
    expm_pade(a)
}

/// Scaling-and-squaring Padé exponential (orders 3 to 13).
pub fn expm_pade<T: Scalar>(a: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    let n = a.require_square()?;
    if a.is_diagonal() {
        let d: Vec<Complex<T>> = a.diag().into_iter().map(|z| z.exp()).collect();
        return Ok(ComplexDense::from_diag(&d));
    }
    let norm = a.norm_one().to_f64().unwrap_or(f64::INFINITY);
    if !norm.is_finite() {
        return Err(Error::InvalidState("expm of a non-finite matrix".into()));
    }
    let id = ComplexDense::<T>::identity(n);
    let lit = |x: f64| Complex::new(T::lit(x), T::zero());

    for (theta, b) in [
        (THETA_3, &B3[..]),
        (THETA_5, &B5[..]),
        (THETA_7, &B7[..]),
        (THETA_9, &B9[..]),
    ] {
        if norm <= theta {
            let a2 = a * a;
            let mut powers = vec![id.clone(), a2.clone()];
            while powers.len() < b.len() / 2 {
                let next = powers.last().expect("nonempty") * &a2;
                powers.push(next);
            }
            let mut u = ComplexDense::zeros(n, n);
            let mut v = ComplexDense::zeros(n, n);
            for (k, p) in powers.iter().enumerate() {
                u += &p.scale(lit(b[2 * k + 1]));
                v += &p.scale(lit(b[2 * k]));
            }
            let u = a * &u;
            return pade_solve(&u, &v);
        }
    }

    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scaled = a.scale_real(T::lit(2f64.powi(-s)));
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = B13;
    let inner_u = &(&a6.scale(lit(b[13])) + &a4.scale(lit(b[11]))) + &a2.scale(lit(b[9]));
    let mut u = &a6 * &inner_u;
    u += &a6.scale(lit(b[7]));
    u += &a4.scale(lit(b[5]));
    u += &a2.scale(lit(b[3]));
    u += &id.scale(lit(b[1]));
    let u = &scaled * &u;
    let inner_v = &(&a6.scale(lit(b[12])) + &a4.scale(lit(b[10]))) + &a2.scale(lit(b[8]));
    let mut v = &a6 * &inner_v;
    v += &a6.scale(lit(b[6]));
    v += &a4.scale(lit(b[4]));
    v += &a2.scale(lit(b[2]));
    v += &id.scale(lit(b[0]));

    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_solve<T: Scalar>(u: &ComplexDense<T>, v: &ComplexDense<T>) -> Result<ComplexDense<T>> {
    solve(&(v - u), &(v + u))
}

/// `exp(-i H t)` for Hermitian `H`.
pub fn unitary_propagator<T: Scalar>(h: &ComplexDense<T>, t: T) -> Result<ComplexDense<T>> {
    h.require_square()?;
    if h.is_diagonal() {
        let d: Vec<Complex<T>> = h
            .diag()
            .into_iter()
            .map(|e| Complex::new(T::zero(), -e.re * t).exp())
            .collect();
        return Ok(ComplexDense::from_diag(&d));
    }
    Ok(eigh(h)?.map(|w| Complex::new(T::zero(), -w * t).exp()))
}

/// Trace distance `½ Tr|a − b|` between Hermitian matrices.
pub fn trace_distance<T: Scalar>(a: &ComplexDense<T>, b: &ComplexDense<T>) -> Result<T> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::DimensionMismatch {
            op: "trace_distance",
            detail: format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let w = eigvalsh(&(a - b))?;
    Ok(w.into_iter().fold(T::zero(), |acc, x| acc + x.abs()) * T::lit(0.5))
}

/// `Tr ρ²`.
pub fn purity<T: Scalar>(rho: &ComplexDense<T>) -> Result<T> {
    let n = rho.require_square()?;
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            acc = acc + (rho[(i, j)] * rho[(j, i)]).re;
        }
    }
    Ok(acc)
}

/// Frobenius distance of `U†U` from the identity.
pub fn unitarity_defect<T: Scalar>(u: &ComplexDense<T>) -> T {
    let n = u.rows();
    (&(&u.adjoint() * u) - &ComplexDense::identity(n)).frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_complex, random_density, random_hermitian, rng};
    use crate::C64;
    use proptest::prelude::*;

    type M = ComplexDense<f64>;

    fn pauli_x() -> M {
        M::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn expm_zero_is_identity() {
        assert_eq!(expm(&M::zeros(3, 3)).unwrap(), M::identity(3));
        assert_eq!(expm_pade(&M::zeros(3, 3)).unwrap(), M::identity(3));
    }

    #[test]
    fn expm_diagonal() {
        let e = expm(&M::from_real_diag(&[1.0, -2.0])).unwrap();
        assert!((e[(0, 0)].re - 1f64.exp()).abs() < 1e-15);
        assert!((e[(1, 1)].re - (-2f64).exp()).abs() < 1e-16);
        assert!(e[(0, 1)].norm() == 0.0);
    }

    #[test]
    fn expm_inverse_pair() {
        let g = pauli_x().scale(C64::new(0.0, -0.35));
        for f in [expm::<f64>, expm_pade::<f64>] {
            let prod = &f(&g).unwrap() * &f(&(-&g)).unwrap();
            assert!(prod.max_abs_diff(&M::identity(2)) < 1e-14);
        }
    }

    #[test]
    fn expm_rejects_rectangular() {
        assert!(matches!(
            expm(&M::zeros(2, 3)),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn pade_matches_eigen_route_for_normal_matrices() {
        let mut r = rng(21);
        for n in [2, 5, 12, 36] {
            let h = random_hermitian(&mut r, n).scale_real(3.0);
            let a = h.scale(C64::new(0.0, -1.0));
            let reference = expm(&a).unwrap();
            let pade = expm_pade(&a).unwrap();
            let rel = (&pade - &reference).frobenius_norm() / reference.frobenius_norm();
            assert!(rel < 1e-12, "n={n} rel={rel:e}");

            let hr = random_hermitian(&mut r, n);
            let reference = expm(&hr).unwrap();
            let pade = expm_pade(&hr).unwrap();
            let rel = (&pade - &reference).frobenius_norm() / reference.frobenius_norm();
            assert!(rel < 1e-12, "n={n} rel={rel:e}");
        }
    }

    #[test]
    fn pade_handles_every_order() {
        let x = pauli_x();
        // exp(t σx) = cosh t I + sinh t σx, covering each Padé branch.
        for t in [1e-3, 0.1, 0.5, 1.5, 4.0, 40.0] {
            let e = expm_pade(&x.scale_real(t)).unwrap();
            assert!((e[(0, 0)].re - t.cosh()).abs() <= 1e-13 * t.cosh());
            assert!((e[(0, 1)].re - t.sinh()).abs() <= 1e-13 * t.cosh());
        }
    }

    #[test]
    fn pade_non_normal_against_series() {
        let a = M::from_real(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let e = expm_pade(&a.scale_real(7.0)).unwrap();
        assert!(e.max_abs_diff(&M::from_real(2, 2, &[1.0, 7.0, 0.0, 1.0]).unwrap()) < 1e-14);
    }

    #[test]
    fn eigh_reconstructs() {
        let mut r = rng(4);
        for n in [1, 2, 3, 7, 20] {
            let h = random_hermitian(&mut r, n);
            let e = eigh(&h).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            let back = e.map(|w| C64::new(w, 0.0));
            assert!(back.max_abs_diff(&h) < 1e-12);
            assert!(unitarity_defect(&e.vectors) < 1e-12);
        }
    }

    #[test]
    fn eigh_degenerate_spectrum() {
        let e = eigh(&M::identity(4).scale_real(2.0)).unwrap();
        assert_eq!(e.values, vec![2.0; 4]);
    }

    #[test]
    fn lu_solve_and_singular() {
        let mut r = rng(13);
        let a = random_complex(&mut r, 6, 6);
        let b = random_complex(&mut r, 6, 2);
        let x = solve(&a, &b).unwrap();
        assert!((&a * &x).max_abs_diff(&b) < 1e-12);
        let sing = M::from_real(2, 2, &[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(solve(&sing, &M::identity(2)).unwrap_err(), Error::Singular);
    }

    #[test]
    fn trace_distance_and_purity() {
        let p0 = M::from_real_diag(&[1.0, 0.0]);
        let p1 = M::from_real_diag(&[0.0, 1.0]);
        assert!((trace_distance(&p0, &p1).unwrap() - 1.0).abs() < 1e-15);
        assert!((purity(&M::identity(2).scale_real(0.5)).unwrap() - 0.5).abs() < 1e-15);
        let mut r = rng(1);
        let rho = random_density(&mut r, 4);
        assert!(trace_distance(&rho, &rho).unwrap() < 1e-14);
    }

    #[test]
    fn f32_expm_is_close() {
        let a = ComplexDense::<f32>::from_real(2, 2, &[0.0, 0.3, -0.3, 0.0]).unwrap();
        let e = expm_pade(&a).unwrap();
        assert!((e[(0, 0)].re - 0.3f32.cos()).abs() < 1e-6);
        assert!((e[(0, 1)].re - 0.3f32.sin()).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unitary_from_hermitian(seed in any::<u64>(), n in 2usize..=36) {
            let mut r = rng(seed);
            let h = random_hermitian(&mut r, n);
            let u = expm(&h.scale(C64::new(0.0, -1.0))).unwrap();
            prop_assert!(unitarity_defect(&u) <= 1e-10);
            let up = unitary_propagator(&h, 1.0).unwrap();
            prop_assert!(up.max_abs_diff(&u) <= 1e-10);
        }
    }
}

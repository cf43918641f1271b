use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex;
use num_traits::{One, Zero};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Work (rows * inner * cols) above which products are split across threads.
const PAR_MATMUL_WORK: usize = 1 << 18;

/// Dense complex matrix stored in row-major order.
///
/// Used for every operator in the crate: Hamiltonians, density matrices,
/// state vectors (as `n x 1` columns) and superoperators.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexDense<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexDense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                detail: format!("{} entries for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Real row-major entries.
    pub fn from_real(rows: usize, cols: usize, values: &[T]) -> Result<Self> {
        Self::from_vec(
            rows,
            cols,
            values.iter().map(|&v| Complex::new(v, T::zero())).collect(),
        )
    }

    pub fn from_diag(diag: &[Complex<T>]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_real_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = Complex::new(d, T::zero());
        }
        m
    }

    /// Column vector (`n x 1`).
    pub fn column(values: &[Complex<T>]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn entries(&self) -> &[Complex<T>] {
        &self.data
    }

    #[inline]
    pub fn entries_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_entries(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<Complex<T>> {
        (0..self.rows.min(self.cols))
            .map(|i| self.data[i * self.cols + i])
            .collect()
    }

    pub fn require_square(&self) -> Result<usize> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn trace(&self) -> Complex<T> {
        self.diag().into_iter().fold(Complex::zero(), |acc, z| acc + z)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, z| acc + z.norm_sqr())
            .sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> T {
        (0..self.cols)
            .map(|j| {
                (0..self.rows).fold(T::zero(), |acc, i| acc + self.data[i * self.cols + j].norm())
            })
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    /// Elementwise max |a - b|. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }

    pub fn is_hermitian(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| {
                (i..self.cols).all(|j| (self[(i, j)] - self[(j, i)].conj()).norm() <= tol)
            })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|z| z.is_zero())
    }

    pub fn is_diagonal(&self) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..self.cols).all(|j| i == j || self.data[i * self.cols + j].is_zero()))
    }

    /// Matrix product. Panics if inner dimensions disagree.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, m) = (self.cols, other.cols);
        let mut out = Self::zeros(self.rows, m);
        let kernel = |(i, out_row): (usize, &mut [Complex<T>])| {
            let a_row = &self.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        };
        if m > 0 && self.rows * n * m >= PAR_MATMUL_WORK {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `self * v` for a plain vector.
    pub fn matvec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut out = vec![Complex::zero(); self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn matvec_into(&self, v: &[Complex<T>], out: &mut [Complex<T>]) {
        assert_eq!(self.cols, v.len());
        assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row
                .iter()
                .zip(v)
                .fold(Complex::zero(), |acc, (&a, &x)| acc + a * x);
        }
    }

    /// Hermitian part `(M + M†)/2`.
    pub fn hermitian_part(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)].conj()) * half
        })
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Real-valued cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ComplexDense<U> {
        ComplexDense {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|z| {
                    Complex::new(
                        U::from(z.re).expect("cast"),
                        U::from(z.im).expect("cast"),
                    )
                })
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for ComplexDense<T> {
    type Output = Complex<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for ComplexDense<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

macro_rules! elementwise {
    ($tr:ident, $f:ident, $op:tt) => {
        impl<T: Scalar> $tr<&ComplexDense<T>> for &ComplexDense<T> {
            type Output = ComplexDense<T>;
            fn $f(self, rhs: &ComplexDense<T>) -> ComplexDense<T> {
                assert_eq!(
                    (self.rows, self.cols),
                    (rhs.rows, rhs.cols),
                    concat!(stringify!($f), ": shape mismatch")
                );
                ComplexDense {
                    rows: self.rows,
                    cols: self.cols,
                    data: self.data.iter().zip(&rhs.data).map(|(a, b)| a $op b).collect(),
                }
            }
        }
        impl<T: Scalar> $tr<ComplexDense<T>> for ComplexDense<T> {
            type Output = ComplexDense<T>;
            fn $f(self, rhs: ComplexDense<T>) -> ComplexDense<T> {
                (&self).$f(&rhs)
            }
        }
        impl<T: Scalar> $tr<&ComplexDense<T>> for ComplexDense<T> {
            type Output = ComplexDense<T>;
            fn $f(self, rhs: &ComplexDense<T>) -> ComplexDense<T> {
                (&self).$f(rhs)
            }
        }
    };
}

elementwise!(Add, add, +);
elementwise!(Sub, sub, -);

impl<T: Scalar> AddAssign<&ComplexDense<T>> for ComplexDense<T> {
    fn add_assign(&mut self, rhs: &ComplexDense<T>) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }
}

impl<T: Scalar> SubAssign<&ComplexDense<T>> for ComplexDense<T> {
    fn sub_assign(&mut self, rhs: &ComplexDense<T>) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a - b;
        }
    }
}

impl<T: Scalar> Neg for &ComplexDense<T> {
    type Output = ComplexDense<T>;
    fn neg(self) -> ComplexDense<T> {
        self.scale_real(-T::one())
    }
}

impl<T: Scalar> Mul<&ComplexDense<T>> for &ComplexDense<T> {
    type Output = ComplexDense<T>;
    fn mul(self, rhs: &ComplexDense<T>) -> ComplexDense<T> {
        self.matmul(rhs)
    }
}

impl<T: Scalar> Mul<ComplexDense<T>> for ComplexDense<T> {
    type Output = ComplexDense<T>;
    fn mul(self, rhs: ComplexDense<T>) -> ComplexDense<T> {
        self.matmul(&rhs)
    }
}

impl<T: Scalar> Mul<&ComplexDense<T>> for ComplexDense<T> {
    type Output = ComplexDense<T>;
    fn mul(self, rhs: &ComplexDense<T>) -> ComplexDense<T> {
        self.matmul(rhs)
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron<T: Scalar>(a: &ComplexDense<T>, b: &ComplexDense<T>) -> ComplexDense<T> {
    let (br, bc) = (b.rows, b.cols);
    let mut out = ComplexDense::zeros(a.rows * br, a.cols * bc);
    let oc = out.cols;
    for i in 0..a.rows {
        for j in 0..a.cols {
            let s = a[(i, j)];
            if s.is_zero() {
                continue;
            }
            for k in 0..br {
                let dst = (i * br + k) * oc + j * bc;
                for l in 0..bc {
                    out.data[dst + l] = s * b.data[k * bc + l];
                }
            }
        }
    }
    out
}

/// `[a, b] = ab - ba`.
pub fn commutator<T: Scalar>(a: &ComplexDense<T>, b: &ComplexDense<T>) -> ComplexDense<T> {
    &(a * b) - &(b * a)
}

/// `{a, b} = ab + ba`.
pub fn anticommutator<T: Scalar>(a: &ComplexDense<T>, b: &ComplexDense<T>) -> ComplexDense<T> {
    &(a * b) + &(b * a)
}

/// Column-stacking vectorization: column `j` of `m` occupies slots
/// `j*rows .. (j+1)*rows` of the result. Every superoperator in the crate
/// uses this convention, under which `vec(AXB) = (Bᵀ ⊗ A) vec(X)`.
pub fn vectorize<T: Scalar>(m: &ComplexDense<T>) -> ComplexDense<T> {
    let mut data = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        for i in 0..m.rows {
            data.push(m[(i, j)]);
        }
    }
    ComplexDense {
        rows: m.rows * m.cols,
        cols: 1,
        data,
    }
}

/// Inverse of [`vectorize`].
pub fn devectorize<T: Scalar>(
    v: &ComplexDense<T>,
    rows: usize,
    cols: usize,
) -> Result<ComplexDense<T>> {
    if v.cols != 1 || v.rows != rows * cols {
        return Err(Error::DimensionMismatch {
            op: "devectorize",
            detail: format!("{}x{} vector into {rows}x{cols}", v.rows, v.cols),
        });
    }
    devectorize_slice(&v.data, rows, cols)
}

pub fn devectorize_slice<T: Scalar>(
    v: &[Complex<T>],
    rows: usize,
    cols: usize,
) -> Result<ComplexDense<T>> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            op: "devectorize",
            detail: format!("{} entries into {rows}x{cols}", v.len()),
        });
    }
    Ok(ComplexDense::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

fn check_bipartite<T: Scalar>(
    op: &'static str,
    rho: &ComplexDense<T>,
    d_s: usize,
    d_a: usize,
) -> Result<()> {
    if !rho.is_square() || rho.rows != d_s * d_a || d_s == 0 || d_a == 0 {
        return Err(Error::DimensionMismatch {
            op,
            detail: format!("{}x{} is not ({d_s}*{d_a}) square", rho.rows, rho.cols),
        });
    }
    Ok(())
}

/// Traces out the ancilla factor of a `system ⊗ ancilla` operator.
pub fn partial_trace_ancilla<T: Scalar>(
    rho: &ComplexDense<T>,
    d_s: usize,
    d_a: usize,
) -> Result<ComplexDense<T>> {
    check_bipartite("partial_trace_ancilla", rho, d_s, d_a)?;
    Ok(ComplexDense::from_fn(d_s, d_s, |s, t| {
        (0..d_a).fold(Complex::zero(), |acc, a| acc + rho[(s * d_a + a, t * d_a + a)])
    }))
}

/// Traces out the system factor of a `system ⊗ ancilla` operator.
pub fn partial_trace_system<T: Scalar>(
    rho: &ComplexDense<T>,
    d_s: usize,
    d_a: usize,
) -> Result<ComplexDense<T>> {
    check_bipartite("partial_trace_system", rho, d_s, d_a)?;
    Ok(ComplexDense::from_fn(d_a, d_a, |a, b| {
        (0..d_s).fold(Complex::zero(), |acc, s| acc + rho[(s * d_a + a, s * d_a + b)])
    }))
}

/// `|ψ⟩⟨ψ|` from a column vector or plain slice.
pub fn projector_of<T: Scalar>(psi: &[Complex<T>]) -> ComplexDense<T> {
    let n = psi.len();
    ComplexDense::from_fn(n, n, |i, j| psi[i] * psi[j].conj())
}

/// `⟨a|b⟩`.
pub fn inner<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter()
        .zip(b)
        .fold(Complex::zero(), |acc, (x, y)| acc + x.conj() * y)
}

pub fn vector_norm<T: Scalar>(v: &[Complex<T>]) -> T {
    v.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_complex, random_density};
    use crate::C64;

    type M = ComplexDense<f64>;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn kron_identity_and_diagonal() {
        assert_eq!(kron(&M::identity(2), &M::identity(2)), M::identity(4));
        let d = M::from_real_diag(&[1.0, 2.0]);
        assert_eq!(kron(&d, &M::identity(2)), M::from_real_diag(&[1.0, 1.0, 2.0, 2.0]));
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = crate::testutil::rng(11);
        let (a, b, cc, d) = (
            random_complex(&mut rng, 2, 2),
            random_complex(&mut rng, 2, 2),
            random_complex(&mut rng, 2, 2),
            random_complex(&mut rng, 2, 2),
        );
        let lhs = &kron(&a, &b) * &kron(&cc, &d);
        let rhs = kron(&(&a * &cc), &(&b * &d));
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
    }

    #[test]
    fn kron_is_associative() {
        let mut rng = crate::testutil::rng(3);
        for _ in 0..5 {
            let a = random_complex(&mut rng, 2, 3);
            let b = random_complex(&mut rng, 3, 2);
            let cc = random_complex(&mut rng, 2, 2);
            let l = kron(&kron(&a, &b), &cc);
            let r = kron(&a, &kron(&b, &cc));
            assert!(l.max_abs_diff(&r) <= 1e-12);
        }
    }

    #[test]
    fn vectorize_identity() {
        let v = vectorize(&M::identity(2));
        assert_eq!(v.entries(), &[c(1.0), c(0.0), c(0.0), c(1.0)]);
    }

    #[test]
    fn vectorize_roundtrip_and_sandwich_identity() {
        let mut rng = crate::testutil::rng(5);
        let m = random_complex(&mut rng, 3, 3);
        assert_eq!(devectorize(&vectorize(&m), 3, 3).unwrap(), m);

        let (a, x, b) = (
            random_complex(&mut rng, 2, 2),
            random_complex(&mut rng, 2, 2),
            random_complex(&mut rng, 2, 2),
        );
        // Direct computation on both sides: entrywise vec(AXB) against the
        // Kronecker-structured matrix applied to vec(X).
        let lhs = vectorize(&(&(&a * &x) * &b));
        let rhs = &kron(&b.transpose(), &a) * &vectorize(&x);
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
    }

    #[test]
    fn devectorize_rejects_bad_shape() {
        let v = vectorize(&M::identity(2));
        assert!(matches!(
            devectorize(&v, 3, 2),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(devectorize(&M::identity(2), 2, 2).is_err());
    }

    #[test]
    fn partial_trace_product_and_maximally_mixed() {
        let mut rng = crate::testutil::rng(7);
        let rho_s = random_density(&mut rng, 2);
        let p = M::from_real_diag(&[0.0, 1.0]);
        let red = partial_trace_ancilla(&kron(&rho_s, &p), 2, 2).unwrap();
        assert!(red.max_abs_diff(&rho_s) < 1e-15);

        let mixed = M::identity(4).scale_real(0.25);
        let red = partial_trace_ancilla(&mixed, 2, 2).unwrap();
        assert!(red.max_abs_diff(&M::identity(2).scale_real(0.5)) < 1e-15);
    }

    #[test]
    fn partial_trace_bell_state() {
        let h = 0.5f64.sqrt();
        let phi = [c(h), c(0.0), c(0.0), c(h)];
        let red = partial_trace_ancilla(&projector_of(&phi), 2, 2).unwrap();
        assert!(red.max_abs_diff(&M::identity(2).scale_real(0.5)) < 1e-15);
    }

    #[test]
    fn partial_trace_rejects_unfactorizable() {
        assert!(partial_trace_ancilla(&M::identity(6), 4, 2).is_err());
        assert!(partial_trace_ancilla(&M::zeros(4, 2), 2, 2).is_err());
    }

    #[test]
    fn partial_trace_preserves_trace() {
        let mut rng = crate::testutil::rng(8);
        for &(ds, da) in &[(2, 3), (3, 2), (4, 4)] {
            let rho = random_density(&mut rng, ds * da);
            let red = partial_trace_ancilla(&rho, ds, da).unwrap();
            assert!((red.trace() - rho.trace()).norm() <= 1e-12);
            let red_a = partial_trace_system(&rho, ds, da).unwrap();
            assert!((red_a.trace() - rho.trace()).norm() <= 1e-12);
        }
    }

    #[test]
    fn parallel_matmul_matches_serial_shape() {
        let mut rng = crate::testutil::rng(9);
        let a = random_complex(&mut rng, 80, 70);
        let b = random_complex(&mut rng, 70, 60);
        let p = &a * &b;
        let mut max = 0.0f64;
        for i in [0, 17, 79] {
            for j in [0, 31, 59] {
                let direct = (0..70).fold(C64::new(0.0, 0.0), |acc, k| acc + a[(i, k)] * b[(k, j)]);
                max = max.max((direct - p[(i, j)]).norm());
            }
        }
        assert!(max < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let a = ComplexDense::<f32>::from_real_diag(&[1.0, 2.0]);
        let k = kron(&a, &ComplexDense::identity(2));
        assert_eq!(k, ComplexDense::from_real_diag(&[1.0, 1.0, 2.0, 2.0]));
    }
}

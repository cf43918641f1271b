use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrixcore::ComplexDense;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexDense<f64> {
    ComplexDense::from_fn(rows, cols, |_, _| {
        Complex64::new(r.sample(StandardNormal), r.sample(StandardNormal))
    })
}

pub fn random_hermitian(r: &mut ChaCha8Rng, n: usize) -> ComplexDense<f64> {
    random_complex(r, n, n).hermitian_part()
}

/// Random full-rank density matrix `G G† / Tr(G G†)`.
pub fn random_density(r: &mut ChaCha8Rng, n: usize) -> ComplexDense<f64> {
    let g = random_complex(r, n, n);
    let p = &g * &g.adjoint();
    let tr = p.trace().re;
    p.scale_real(1.0 / tr)
}

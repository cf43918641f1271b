//! Dense complex linear algebra: products, Kronecker products, vectorization,
//! partial traces, LU, Hermitian eigen-decomposition and the matrix exponential.

mod dense;
mod linalg;

pub use dense::{
    anticommutator, commutator, devectorize, devectorize_slice, inner, kron, partial_trace_ancilla,
    partial_trace_system, projector_of, vector_norm, vectorize, ComplexDense,
};
pub use linalg::{
    eigh, eigvalsh, expm, expm_pade, inverse, min_eigenvalue, purity, solve, trace_distance,
    unitarity_defect, unitary_propagator, Eigh, Lu,
};

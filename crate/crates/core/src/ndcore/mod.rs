//! Deterministic numeric kernel: dense matrices, seeded randomness,
//! finite-difference gradient checks and sample statistics.

mod gradcheck;
mod matrix;
mod rng;
pub mod stats;

pub use gradcheck::grad_check;
#[cfg(feature = "parallel")]
pub use matrix::{matmul_par, matmul_tn_par};
pub use matrix::{matmul, matmul_nt, matmul_seq, matmul_tn, matmul_tn_seq, DenseMatrix};
pub use rng::{derive_seed, sample_normal, SeededRng};

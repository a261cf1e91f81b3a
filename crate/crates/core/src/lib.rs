//! Deep weight factorization: sparse training of fully connected networks by
//! replacing each weight with an elementwise product of `D` factors.

pub mod data;
pub mod error;
pub mod factorization;
pub mod init;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod optimizer;
pub mod pruning;

pub use error::{DwfError, Result};

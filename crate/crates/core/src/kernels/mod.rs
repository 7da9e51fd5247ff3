//! Local (single-rank) tiles and the multiply/accumulate kernels that run on
//! them.
//!
//! Every kernel reports a [`FlopMeter`]. One scalar multiply-add counts as two
//! flops, in the kernels and in the performance model alike.

mod csr;
mod dense;
mod ops;

pub use csr::CsrTile;
pub use dense::DenseTile;
pub use ops::{csr_add, dense_add, spgemm_flops, spgemm_local, spmm_local};
pub(crate) use ops::dense_add_assign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("{op}: dimension mismatch ({left_rows}x{left_cols} vs {right_rows}x{right_cols})")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("malformed CSR tile: {0}")]
    MalformedCsr(String),
    #[error("dense tile has {got} values, expected {expected}")]
    BadDenseLength { expected: usize, got: usize },
}

impl KernelError {
    pub(crate) fn dims(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        KernelError::DimensionMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}

/// Flop and output counts for one or more kernel invocations.
///
/// `output_nnz` is only tracked by the sparse-output kernels; dense-output
/// kernels leave it at zero, so `cf()` is `None` for pure SpMM work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopMeter {
    pub flops: u64,
    pub output_nnz: u64,
}

impl FlopMeter {
    pub fn new(flops: u64, output_nnz: u64) -> Self {
        FlopMeter { flops, output_nnz }
    }

    /// Compression factor: flops performed per nonzero output.
    pub fn cf(&self) -> Option<f64> {
        (self.output_nnz > 0).then(|| self.flops as f64 / self.output_nnz as f64)
    }
}

impl std::ops::Add for FlopMeter {
    type Output = FlopMeter;

    fn add(self, rhs: FlopMeter) -> FlopMeter {
        FlopMeter {
            flops: self.flops + rhs.flops,
            output_nnz: self.output_nnz + rhs.output_nnz,
        }
    }
}

impl std::ops::AddAssign for FlopMeter {
    fn add_assign(&mut self, rhs: FlopMeter) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for FlopMeter {
    fn sum<I: Iterator<Item = FlopMeter>>(iter: I) -> Self {
        iter.fold(FlopMeter::default(), |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cf_requires_output() {
        assert_eq!(FlopMeter::new(10, 0).cf(), None);
        assert_eq!(FlopMeter::new(10, 5).cf(), Some(2.0));
        let total: FlopMeter = [FlopMeter::new(2, 1), FlopMeter::new(6, 1)].into_iter().sum();
        assert_eq!(total, FlopMeter::new(8, 2));
    }
}

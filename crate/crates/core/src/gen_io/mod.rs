//! Matrix generation and Matrix Market I/O.
//!
//! Every generator draws from `ChaCha8Rng::seed_from_u64(seed)`, a
//! counter-based stream cipher RNG with a fixed, platform-independent output,
//! so a seed always yields the same matrix byte for byte.

mod mtx;
mod rmat;
mod synth;

pub use mtx::{read_matrix_market, read_matrix_market_from, write_matrix_market, write_matrix_market_to};
pub use rmat::{rmat, DuplicateMode, RmatParams, MAX_RMAT_SCALE};
pub use synth::{random_dense, random_sparse, tile_density_sparse, uniform_tiles};

use thiserror::Error;

use crate::kernels::KernelError;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl GenError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GenError::InvalidParams(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        GenError::Parse { line, msg: msg.into() }
    }
}

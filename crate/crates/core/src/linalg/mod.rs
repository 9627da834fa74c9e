//! Dense matrices and singular value decomposition.

mod matrix;
mod svd;

pub use matrix::{dot, norm2, Matrix};
pub use svd::{
    spectral_norm, svd, svd_labeled, truncated_reconstruct, SvdFactors, CONVERGENCE_TOL,
    MAX_SWEEPS,
};

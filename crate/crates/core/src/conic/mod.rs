//! Real conic programs over zero, nonnegative, second-order and PSD cones,
//! with an interior-point solver.

pub(crate) mod cones;
mod embed;
mod kkt;
mod program;
mod solver;

pub use embed::{
    add_complex_soc, add_hermitian_psd, embed_complex_soc, embed_hermitian_matrix, embed_hermitian_psd, CAffine,
    HermExpr,
};
pub use program::{Affine, Block, ConeKind, ConicProgram, SymExpr};
pub use solver::{solve, SolveResult, SolveStatus, SolverSettings};

/// svec helpers exposed for callers that read PSD duals or slacks.
pub mod svec {
    pub use super::cones::{smat, svec, svec_len};
}

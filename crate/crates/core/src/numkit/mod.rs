//! Dense matrix kernel with hand-written backward passes and a
//! finite-difference checker.

mod grad;
mod matrix;
mod ops;

pub use grad::{
    activation_traced, finite_diff_check, l2_normalize_traced, logsumexp_traced, matmul_traced,
    numeric_gradient, relative_error, ActivationVjp, GradPair, LogsumexpVjp, MatmulVjp,
    NormalizeVjp, Vjp, FD_EPS,
};
pub(crate) use matrix::{gemm_acc, gemm_tn_acc};
pub use matrix::{dot, matmul, matmul_backward, matmul_nt, matmul_tn, Matrix};
pub use ops::{
    gelu, l2_normalize, l2_normalize_backward, logsumexp_row, norm, normalize_rows,
    normalize_rows_backward, relu, Activation, NORM_EPS,
};

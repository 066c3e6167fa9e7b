//! Dense and CSR kernels, seeded randomness and the binary tensor format.

mod csr;
mod dense;
mod rng;
pub mod tensor_io;

pub use csr::{csr_from_dense, csr_matmul, dense_matmul_csr_t, CsrMatrix};
pub use dense::{
    column_l2_norms, column_sum_squares, matmul, matmul_a_bt, matmul_at_b, DenseMatrix,
};
pub(crate) use dense::dot_f64;
pub use rng::Rng;

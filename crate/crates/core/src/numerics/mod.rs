//! Tensors, reproducible randomness, and half-precision emulation.

mod precision;
mod rng;
mod tensor;

pub use precision::Precision;
pub use rng::{gaussian, Purpose, RngStream, StreamId};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

/// Round `t` to `p`. Overflow and underflow are values, not errors.
pub fn round_to(t: &Tensor, p: Precision) -> Tensor {
    t.round_to(p)
}

/// Rank-2 matrix product with products and partial sums carried in
/// `accumulate` and the result rounded to `out`.
pub fn matmul(a: &Tensor, b: &Tensor, accumulate: Precision, out: Precision) -> crate::Result<Tensor> {
    a.matmul(b, accumulate, out)
}

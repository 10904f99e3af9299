//! Minimal reverse-mode differentiation over dense double-precision arrays.
//!
//! Only the operations needed by the embedding extractor and its objective
//! are provided. Every forward op rejects non-finite results, reporting the
//! op name and node index.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare_with_finite_differences, gradcheck, GRAD_FLOOR};
pub use tape::{BatchNormStats, Gradients, Tape, Var, SQRT_GRAD_EPS};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::{dot, margin_cosine, norm};

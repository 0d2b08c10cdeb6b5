//! Dense f64 tensor arithmetic with reverse-mode automatic differentiation,
//! plus the probability and divergence primitives used across the crate.
//!
//! Everything is 64-bit: the analysis metrics (FID, effective rank) involve
//! covariance and matrix-root arithmetic that is precision sensitive, and the
//! model is small enough that training in f64 costs little.

pub mod dense;
pub mod gradcheck;
pub mod prob;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use prob::{cross_entropy, kl_divergence, softmax_with_temperature, ProbVector, PROB_FLOOR};
pub use tape::{GradStore, Tape, Var};
pub use tensor::Tensor;

//! Deterministic dense tensors and seeded randomness.
//!
//! Everything runs in `f64`. Transcendental functions go through `libm` so
//! results do not depend on the platform's math library.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    avg_pool2, col2im3, exp, im2col3, matmul, matmul_tn, resize_nearest, softmax_rows, upsample2,
};
pub use rng::{gaussian, Rng};
pub use tensor::Tensor;

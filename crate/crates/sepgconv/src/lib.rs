//! Group-equivariant convolutions on the square grid for the rotation
//! group C4 and the roto-reflection group D4, their separable (g- and
//! gc-) factorizations, and the machinery around them: a small reverse-mode
//! autograd tape, an exact parameter/MAC cost model, filter-redundancy
//! analysis, dataset handling, and a training harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! cost model uses exact `u128`/rational arithmetic, never floats.

pub mod analysis;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod group;
pub mod io;
pub mod layers;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Number of intra-op worker threads, taken from `SEPGCONV_THREADS` on
/// first use (default 1). Work is partitioned deterministically, so the
/// thread count never changes numeric results.
pub fn intra_op_threads() -> usize {
    static THREADS: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("SEPGCONV_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used wherever tolerances are tight.
pub type Tensor64 = Tensor<f64>;

//! Padding-free transformer encoder inference for variable-length batches.
//!
//! Module map:
//!
//! * [`tensor`]: dense `f32` tensors, blocked GEMM with epilogue hooks
//! * [`packing`]: mask, prefix-sum offsets, pack/unpack
//! * [`grouped_gemm`]: variable-shape grouped GEMM and its tile scheduler
//! * [`attention`]: padded baseline, short fused and long grouped attention
//! * [`fusion`]: add-bias + layernorm and bias + GELU, fused and unfused
//! * [`encoder`]: BERT layer, stacked forward pass, weights and config
//! * [`flops`]: analytic and exact FLOP accounting
//! * [`bench`]: length generation and the optimization-ladder benchmark

pub mod attention;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod grouped_gemm;
pub mod packing;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

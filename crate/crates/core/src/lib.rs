pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod nn;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod store;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Gradients, Tape, Tensor, Var};

/// Caps the worker pool used by large kernels. Call once, before any
/// parallel work.
pub fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))
}

//! A small convolutional network framework and the blood-cell classifier
//! built on it.
//!
//! Tensors are channel-last (`[n, h, w, c]`), every layer carries a
//! hand-written backward pass, and training is deterministic for a fixed
//! seed.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod optimize;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    blood_cell_architecture, build_blood_cell_model, SequentialModel, TrainConfig, BLOOD_CELL_INPUT_SHAPE,
};
pub use tensor::{Precision, Scalar, Shape, Tensor};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "HEMOCNN_THREADS";

/// Sizes the global worker pool from `HEMOCNN_THREADS` when it is set to a
/// positive integer. Has no effect once the pool exists.
pub fn init_thread_pool() {
    let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    else {
        return;
    };
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

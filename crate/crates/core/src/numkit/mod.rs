//! Numeric substrate: dense matrices, seeded random streams, a
//! finite-difference gradient oracle and the checkpoint container.

mod checkpoint;
mod grad;
mod matrix;
mod rng;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode as decode_checkpoint, encode as encode_checkpoint,
    CheckpointError, TensorMap, MAGIC, VERSION,
};
pub use grad::{finite_diff_grad, rel_error, DEFAULT_STEP};
pub use matrix::{add, axpy, dot, norm, sq_dist, sub, Matrix};
pub use rng::{derive_seed, rng_gaussian, rng_uniform, RngState};

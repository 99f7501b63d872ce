//! Minimal deterministic differentiable-computation engine: the layers the
//! attention and policy networks need, reverse-mode gradients, Adam, and a
//! versioned weight format. 32-bit for training, with every layer generic
//! over the scalar so gradient checks run in 64-bit.

pub mod gemm;
pub mod init;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use layers::{
    BatchNorm2d, Conv1d, Conv2d, Linear, MaxPool2d, Mode, Module, Params, ReLU, Sequential,
    SoftmaxSpatial, UpsampleNearest2,
};
pub use optim::Adam;
pub use tensor::{Param, Real, Tensor};

#[derive(thiserror::Error, Debug)]
pub enum NnError {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite loss at batch {batch}")]
    Diverged { batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

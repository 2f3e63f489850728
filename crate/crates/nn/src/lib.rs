//! Small reverse-mode autodiff engine over `ndarray`, sized for desk-scale
//! convolutional networks on CPU. Activations are NHWC; convolutions lower to
//! im2col + GEMM.

pub mod conv;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tape;

pub use optim::AdamW;
pub use params::{Ema, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` missing from input")]
    MissingParam(String),
}

//! A small CPU engine for 2D convolutional networks in `f64`.
//!
//! Layers cache what they need during a [`Mode::Train`] forward pass and
//! expose an explicit [`Layer::backward`]. Composite networks wire the
//! backward passes by hand, which keeps skip connections and multi-output
//! encoders straightforward. Everything is single-threaded and
//! deterministic for a fixed seed.

mod activation;
mod conv;
mod gemm;
pub mod init;
mod io;
mod linear;
pub mod loss;
mod module;
mod norm;
mod optim;
mod pool;
mod tensor;
#[cfg(test)]
mod testutil;

pub use activation::LeakyRelu;
pub use conv::{Conv2d, ConvTranspose2x2};
pub use io::{load_safetensors, save_safetensors};
pub use linear::Linear;
pub use module::{
    join, load_state_dict, num_params, slot_shapes, state_dict, zero_grad, Layer, Mode, Module, Param, Slot,
    StateDict, StateMismatch,
};
pub use norm::{BatchNorm2d, InstanceNorm2d};
pub use optim::Adam;
pub use pool::MaxPool2d;
pub use tensor::{concat_channels, split_channels, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("state dict mismatch: {0}")]
    StateMismatch(StateMismatch),
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

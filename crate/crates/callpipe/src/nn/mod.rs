//! Reverse-mode automatic differentiation and the model zoo.
//!
//! [`Tensor`] is a dense row-major N-D array of `f32`. Forward operations
//! record onto a [`Tape`]; [`Tape::backward`] walks the recorded nodes in
//! reverse and accumulates gradients onto trainable parameters. The model
//! zoo ([`build_model`]) offers three desk-scale convolutional
//! architectures — a plain stack, a residual network, and a doubled-3×3
//! stack — plus an optional trainable PCEN frontend.

mod models;
mod tape;
mod tensor;

pub use models::{
    build_model, forward, forward_eval, Architecture, BnBuffer, Forward, Mode, Model, ModelSpec,
    Parameter, BN_EPS, BN_MOMENTUM,
};
pub use tape::{softmax, NodeId, Tape};
pub use tensor::Tensor;

//! Noise-prediction network, reverse-mode differentiation and the
//! finite-difference oracle.

pub mod checkpoint;
pub mod fd;
pub mod mlp;
pub mod tape;

pub use checkpoint::{params_digest, Checkpoint};
pub use fd::{finite_diff_gradient, relative_error};
pub use mlp::{
    backward, forward, input_vjp, predict_noise, predict_noise_on_tape, Activation, ForwardCache,
    LayerShape, NetworkSpec, ParameterSet,
};
pub use tape::{GradientTape, Recording, Tape, Var};

/// d(root)/d(parameters) of a recorded scalar loss.
pub fn grad_params(tape: &GradientTape) -> crate::Result<Vec<f64>> {
    tape.grad_params()
}

/// d(root)/d(input block `which`) of a recorded scalar loss.
pub fn grad_input(tape: &GradientTape, which: usize) -> crate::Result<Vec<f64>> {
    tape.grad_input(which)
}

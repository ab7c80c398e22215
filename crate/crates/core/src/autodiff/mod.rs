//! Reverse-mode differentiation, the conditioned velocity network, Adam, and
//! the checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod net;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradients, gradient_check, gradient_check_report, primitive_gradchecks, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use net::{sinusoidal, Network, NetworkSpec};
pub use tensor::Tensor;

use crate::error::Result;

/// Anything that maps a state `z: [C, H, W]` at time `t` with step size `d` to a velocity.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64, d: f64) -> Result<Tensor>;
}

impl VelocityField for Network {
    fn velocity(&self, z: &Tensor, t: f64, d: f64) -> Result<Tensor> {
        self.forward_single(z, t, d)
    }
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, f64) -> Result<Tensor>,
{
    fn velocity(&self, z: &Tensor, t: f64, d: f64) -> Result<Tensor> {
        self(z, t, d)
    }
}

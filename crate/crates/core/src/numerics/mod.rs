//! Dense tensor substrate: values, a differentiation tape, seeded sampling and
//! finite-difference gradient checking.

mod graph;
mod kernels;
mod params;
mod rng;
mod tensor;

pub mod gradcheck;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var, BCE_EPS, STE_SURROGATE_TEMPERATURE};
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, GUMBEL_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Relaxed Bernoulli sample `σ((logits + g₁ − g₂)/temperature)`.
///
/// `g₁`, `g₂` are independent Gumbel(0, 1) draws that enter the tape as
/// constants, so gradients flow only through `logits`.
pub fn gumbel_sigmoid(g: &mut Graph, logits: Var, temperature: f32, rng: &mut Rng) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let shape = g.shape(logits).to_vec();
    let noise = Tensor::from_fn(shape, |_| (rng.gumbel() - rng.gumbel()) as f32);
    let noise = g.constant(noise);
    let shifted = g.add(logits, noise)?;
    let scaled = g.scale(shifted, 1.0 / temperature);
    Ok(g.sigmoid(scaled))
}

/// Hard `I(p > θ)` with the straight-through gradient contract of [`Graph::ste_threshold`].
pub fn ste_threshold(g: &mut Graph, p: Var, theta: Var) -> Result<Var> {
    g.ste_threshold(p, theta)
}

//! Dense tensors with an explicit, caller-scoped reverse-mode tape.
//!
//! The same machinery serves parameter gradients during training and input
//! gradients inside attacks: callers decide which nodes are leaves.

mod broadcast;
mod element;
mod tape;
mod tensor;

pub use element::Element;
pub use tape::{shifted_softplus, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sign;

use crate::error::{Error, Result};

/// Reparameterized Gaussian sample `mu + sigma * noise`.
///
/// `noise` is recorded as a constant; gradients flow into `mu` and `sigma`.
/// `sigma` and `noise` broadcast against `mu`, so a `[S, n, K]` noise block
/// yields `S` samples per row.
pub fn gaussian_reparam_sample<'t, E: Element>(
    mu: &Var<'t, E>,
    sigma: &Var<'t, E>,
    noise: Tensor<E>,
) -> Result<Var<'t, E>> {
    if sigma.value().data().iter().any(|&s| !(s > E::zero())) {
        return Err(Error::invalid("reparameterization requires sigma > 0"));
    }
    let noise = mu.tape().constant(noise);
    let scaled = sigma.mul(&noise)?;
    mu.add(&scaled)
}

//! Dense-network training core.
//!
//! A model is a trunk of ReLU dense layers followed by one or more linear
//! classification heads. Everything is `f64`. Gradients are computed by
//! hand-written backprop and applied with AdamW.

mod batch;
pub mod loss;
mod model;
mod optim;

pub use batch::{Batch, HeadRouting};
pub use model::{Dense, Gradients, HeadMode, MlpModel, TrunkCache};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState, Gate};

use crate::error::{Error, Result};

/// A differentiable training objective evaluated on one batch.
pub trait Objective {
    /// Returns the objective value at the current parameters and its gradient.
    fn evaluate(&self, model: &MlpModel, batch: &Batch) -> Result<(f64, Gradients)>;
}

/// One optimizer step on `objective`. Returns the pre-update loss.
pub fn train_step(
    model: &mut MlpModel,
    state: &mut AdamWState,
    batch: &Batch,
    objective: &dyn Objective,
    gates: &[Gate],
) -> Result<f64> {
    let (loss, grads) = objective.evaluate(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    if let Some(index) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of tensor {index}")));
    }
    state.step(model, &grads, gates)?;
    Ok(loss)
}

//! Trainable denoiser stack: tensors, a minimal reverse-mode tape, the
//! encoder-decoder network, and the optimizer.

pub mod optim;
pub mod tape;
pub mod tensor;
pub mod unet;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::markup::encode::EncodedSeq;
use crate::scalar::{Grid, Scalar};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("numerical divergence in {0}")]
    NumericalDivergence(String),
    #[error("gradient path not supported by this denoiser")]
    NoGradientPath,
}

/// Per-parameter gradient accumulator, keyed by parameter name. BTreeMap
/// keeps reduction order independent of insertion order.
pub type GradStore<S> = BTreeMap<String, Vec<S>>;

/// Merge `other` into `acc` by elementwise addition.
pub fn accumulate_grads<S: Scalar>(acc: &mut GradStore<S>, other: &GradStore<S>) {
    for (name, g) in other {
        match acc.get_mut(name) {
            Some(slot) => {
                assert_eq!(slot.len(), g.len(), "gradient shape drift for {name}");
                for (a, b) in slot.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Backward pass handed back by [`EpsDenoiser::eps_with_grad`]: feed it
/// dL/d(eps_hat) and receive parameter gradients.
pub type BackwardFn<'a, S> = Box<dyn FnOnce(&Grid<S>) -> GradStore<S> + 'a>;

/// The noise-prediction interface the diffusion code trains and samples.
pub trait EpsDenoiser<S: Scalar> {
    /// Predict the noise in `y_t` at timestep `t` given conditioning tokens.
    fn eps(&self, y_t: &Grid<S>, t: usize, cond: &EncodedSeq) -> Result<Grid<S>, NnError>;

    /// Like [`eps`](Self::eps) but also returns the backward pass. Oracles
    /// used in tests may leave this unimplemented.
    fn eps_with_grad(
        &self,
        y_t: &Grid<S>,
        t: usize,
        cond: &EncodedSeq,
    ) -> Result<(Grid<S>, BackwardFn<'_, S>), NnError> {
        let _ = (y_t, t, cond);
        Err(NnError::NoGradientPath)
    }

    /// Number of forward evaluations so far, when the implementation counts
    /// them; rollout cost accounting reads this.
    fn eval_count(&self) -> Option<u64> {
        None
    }
}

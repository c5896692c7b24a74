//! Desk-scale markup-to-image diffusion laboratory.
//!
//! The crate pairs two deterministic toy markup renderers with a small
//! pixel-space denoising diffusion model so that training procedures,
//! notably scheduled sampling on the reverse chain, can be studied and
//! verified end to end on a CPU: exact ground-truth images, a hand-rolled
//! reverse-mode tape for the denoiser, alignment-aware evaluation metrics,
//! and a fully seeded harness where every byte of output is reproducible.

pub mod diffusion;
pub mod harness;
pub mod image;
pub mod markup;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod schedule;

pub use image::ImageBuffer;
pub use nn::EpsDenoiser;
pub use rng::Prng;
pub use scalar::{Grid, Scalar};
pub use schedule::VarianceSchedule;

//! Scalar abstraction and the single-channel `Grid` container.
//!
//! Training runs in f32; gradient and identity checks instantiate the same
//! code at f64 so tolerances can be set near machine precision.

use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;

/// Floating-point element type for all numeric kernels.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// Lossy conversion from f64; panics only for exotic types, not f32/f64.
    fn fp(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every supported scalar")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("every supported scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major H x W grid of scalars; the latent image type.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S = f32> {
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn fill(h: usize, w: usize, v: S) -> Self {
        Grid { h, w, data: vec![v; h * w] }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::fill(h, w, S::zero())
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), h * w, "grid data length mismatch");
        Grid { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.w..(r + 1) * self.w]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Grid { h: self.h, w: self.w, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine; shapes must match.
    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!((self.h, self.w), (other.h, other.w), "grid shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Grid { h: self.h, w: self.w, data }
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|x| x.to64()).sum::<f64>() / self.data.len() as f64
    }

    /// Draw every element i.i.d. standard normal from `rng`.
    pub fn standard_normal(h: usize, w: usize, rng: &mut crate::rng::Prng) -> Self {
        let data = (0..h * w).map(|_| S::fp(rng.normal())).collect();
        Grid { h, w, data }
    }

    pub fn cast<T: Scalar>(&self) -> Grid<T> {
        Grid { h: self.h, w: self.w, data: self.data.iter().map(|x| T::fp(x.to64())).collect() }
    }
}

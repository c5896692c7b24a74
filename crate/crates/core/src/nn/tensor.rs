//! Dense tensors and named parameter collections.

use std::collections::BTreeMap;

use crate::rng::Prng;
use crate::scalar::Scalar;

/// Row-major dense tensor; the last axis is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor size mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| T::fp(x.to64())).collect() }
    }
}

/// One trainable tensor: value, gradient slot, and whether weight decay
/// applies (embeddings, norm affines, and biases are excluded).
#[derive(Clone, Debug)]
pub struct ParamTensor<S> {
    pub value: Tensor<S>,
    pub decay: bool,
}

/// Named parameter collection. BTreeMap iteration order (lexicographic by
/// name) is the fixed traversal order everywhere: gradient reduction,
/// optimizer updates, checkpoint layout, finite differencing.
#[derive(Clone, Debug, Default)]
pub struct Params<S> {
    map: BTreeMap<String, ParamTensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, decay: bool) {
        let prior = self.map.insert(name.to_string(), ParamTensor { value, decay });
        assert!(prior.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ParamTensor<S> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor<S> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (k.clone(), ParamTensor { value: p.value.cast::<T>(), decay: p.decay })
                })
                .collect(),
        }
    }
}

/// He-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Prng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::fp((rng.uniform() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Gaussian fill with the given standard deviation.
pub fn normal_init<S: Scalar>(shape: &[usize], std: f64, rng: &mut Prng) -> Tensor<S> {
    let data = (0..shape.iter().product::<usize>()).map(|_| S::fp(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data)
}

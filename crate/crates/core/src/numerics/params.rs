use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

use super::{Real, Tensor};

/// Learnable tensors addressed by canonical dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Restricts the store to names accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Elementwise `self += other` over matching names.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (name, t) in &other.tensors {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(shape_err("accumulate", name.clone()));
            }
            for (a, b) in dst.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Inserts a tensor drawn from `uniform(-bound, bound)`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    /// Projection weight `fan_in x fan_out` from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.init_uniform(name, &[fan_in, fan_out], bound, rng);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, F::lit(value)));
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .map(|(k, v)| other.tensors.get(k).map_or(f64::INFINITY, |o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }
}

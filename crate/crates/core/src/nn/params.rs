use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mat::Mat;

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> usize {
        let d = Normal::new(0.0, std).expect("finite std");
        let m = Mat::from_fn(rows, cols, |_, _| d.sample(rng));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Mat>);

impl Grads {
    pub fn zeros_like(p: &ParamSet) -> Self {
        Grads(p.values().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| a.add_assign(b));
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|m| m.data.iter_mut().for_each(|x| *x *= s));
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|m| m.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|m| m.is_finite())
    }

    /// Sums per-sample gradients in order.
    pub fn sum(parts: Vec<Grads>, like: &ParamSet) -> Grads {
        let mut total = Grads::zeros_like(like);
        for p in &parts {
            total.add_assign(p);
        }
        total
    }
}

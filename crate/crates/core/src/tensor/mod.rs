//! Minimal reverse-mode differentiable array engine.
//!
//! [`Tensor`] is the owned storage unit (values plus an optional gradient
//! accumulator). [`Graph`] records every differentiable op executed on a
//! forward pass in topological order and replays it in reverse on
//! [`Graph::backward`]. All arithmetic is `f64` so central differences stay
//! meaningful at `h = 1e-5`.

mod adam;
mod gradcheck;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckEntry, GradCheckReport};
pub use graph::{Activation, Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    /// Glorot uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    UniformScaled,
    /// Glorot normal: `N(0, 2 / (fan_in + fan_out))`.
    NormalScaled,
}

/// Dense row-major array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel = checked_numel(&shape)?;
        if numel != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Draws a fresh tensor. Leading axis is treated as fan-in and the
    /// product of the remaining axes as fan-out (a 1-D shape uses its length
    /// for both).
    pub fn init<R: Rng + ?Sized>(shape: &[usize], scheme: Init, rng: &mut R) -> Result<Self> {
        let n = checked_numel(shape)?;
        let (fan_in, fan_out) = fans(shape);
        let values = match scheme {
            Init::Zeros => vec![0.0; n],
            Init::UniformScaled => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::NormalScaled => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
        };
        Tensor::new(shape.to_vec(), values)
    }

    /// Marks this tensor as a gradient target, allocating a zeroed accumulator.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `scale * g` into the accumulator. No-op when grads are disabled.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) -> Result<()> {
        let Some(acc) = self.grad.as_mut() else {
            return Ok(());
        };
        if acc.len() != g.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                acc.len()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(g) {
            *a += scale * x;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("empty shape"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
        [] => (1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::init(&[2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(t.values(), &[0.0; 4]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Tensor::init(&[4], Init::UniformScaled, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Tensor::init(&[4], Init::UniformScaled, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_uniform_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::init(&[100, 100], Init::UniformScaled, &mut rng).unwrap();
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(t.values().iter().all(|v| v.abs() <= bound));
        // the draw actually uses the range
        assert!(t.values().iter().any(|v| v.abs() > 0.9 * bound));
    }

    #[test]
    fn zero_sized_dimension_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Tensor::init(&[3, 0], Init::Zeros, &mut rng).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn accumulate_respects_scale() {
        let mut t = Tensor::zeros(vec![2]).unwrap().with_grad();
        t.accumulate_grad(&[1.0, 2.0], 0.5).unwrap();
        t.accumulate_grad(&[1.0, 2.0], 0.5).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}

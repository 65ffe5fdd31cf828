//! A small reverse-mode differentiable tensor engine with exactly the
//! operators the codec pipeline needs, plus Adam and a checkpoint format.

mod adam;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use real::Real;
pub use tape::{Pins, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// A named learnable tensor. Frozen parameters are never updated and bind
/// onto a tape as non-differentiable leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self { name: name.into(), tensor, frozen: false }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn kernel(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::new(name, Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound))))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }
}

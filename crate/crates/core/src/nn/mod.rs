//! Minimal f64 neural-network toolkit with hand-written backward passes.
//!
//! Activations are `channels × time` [`Tensor`]s. Layers are stateless apart
//! from their [`Param`]s: `forward` is a pure function, and `backward` takes the
//! same input again plus the output gradient, accumulates parameter gradients
//! and returns the input gradient. Callers keep whatever intermediates they need.

mod adam;
mod gemm;
mod layers;
mod tensor;

pub use adam::Adam;
pub use layers::{silu, silu_backward, Conv1d, ConvTranspose1d, Linear};
pub use tensor::Tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            frozen: false,
        }
    }

    /// Uniform init with variance `gain² / fan_in`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        for v in p.value.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    /// Gradient buffer for bulk accumulation; `None` when frozen.
    pub(crate) fn grad_mut(&mut self) -> Option<&mut [f64]> {
        if self.frozen {
            return None;
        }
        if self.grad.len() != self.value.len() {
            self.grad.resize(self.value.len(), 0.0);
        }
        Some(&mut self.grad)
    }

    /// Adds `g` into the gradient unless the parameter is frozen.
    #[inline]
    pub(crate) fn accumulate(&mut self, i: usize, g: f64) {
        if !self.frozen {
            self.grad[i] += g;
        }
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

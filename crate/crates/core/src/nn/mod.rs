//! A small trainable network stack with hand-written reverse-mode gradients.
//!
//! All arithmetic runs in f64. During ordinary training parameters are rounded
//! to f32 after every optimizer step so that checkpoints (stored as f32) are
//! lossless; gradient checking skips the rounding and runs fully in f64.

mod adam;
mod gradcheck;
mod layers;
mod loss;
mod schedule;

pub use adam::{adam_step, Adam, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{
    central_difference, grad_check, gradient_pair, max_relative_error, piecewise_gradient_pair, relative_error,
};
pub use layers::{
    conv_output_dim, decisions, linear_backward, linear_forward, pool2d, pool2d_backward, pool_output_dim, Activation, Conv2d,
    ConvCache, Layer, LayerCache, LayerSpec, Linear, Pool2d, PoolCache, PoolMode, Sequential,
};
pub use loss::{multihead_cross_entropy, softmax};
pub use schedule::{sgdr_lr, SgdrSchedule};

use rand::Rng;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`, rounded to f32.
    pub fn he_uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(name, shape);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.value {
            *v = rng.gen_range(-bound..bound) as f32 as f64;
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
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.value {
            *v = *v as f32 as f64;
        }
    }
}

/// Anything exposing an ordered list of parameters.
pub trait Parameterized {
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

    /// Concatenated gradients in parameter order.
    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Concatenated values in parameter order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Overwrites the value at flat index `idx`, returning the previous value.
    fn set_flat(&mut self, mut idx: usize, v: f64) -> f64 {
        for p in self.params_mut() {
            if idx < p.value.len() {
                return std::mem::replace(&mut p.value[idx], v);
            }
            idx -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }
}

use crate::error::{Error, Result};

use super::Parameterized;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam over every parameter of a model, in `params()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<M: Parameterized + ?Sized>(model: &M) -> Self {
        Adam {
            states: model.params().iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    /// Applies one step using the gradients accumulated in `model`, optionally
    /// rounding the updated values to f32.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64, round_to_f32: bool) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.states.len() {
            return Err(Error::Shape("optimizer state does not match model".into()));
        }
        for (p, st) in params.iter_mut().zip(&mut self.states) {
            let p = &mut **p;
            adam_step(&mut p.value, &p.grad, st, lr)?;
            if round_to_f32 {
                p.round_to_f32();
            }
        }
        Ok(())
    }
}

//! Adam optimizer with bias correction.

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Scalars Adam can update in place.
pub trait AdamScalar: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl AdamScalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl AdamScalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Argument(format!("adam learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update<T: AdamScalar>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        ensure_dim!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            "adam expects {} values, got params {} / grads {}",
            self.m.len(),
            params.len(),
            grads.len()
        );
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = T::from_f64(p.to_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
        Ok(())
    }
}

/// Tensor form of [`AdamState::update`].
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState) -> Result<()> {
    ensure_dim!(
        params.shape() == grads.shape(),
        "adam param shape {:?} vs grad shape {:?}",
        params.shape(),
        grads.shape()
    );
    state.update(params.data_mut(), grads.data())
}

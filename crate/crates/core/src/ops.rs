//! Elementwise kernels and row-wise normalization.
//!
//! Reductions accumulate in f64; results are stored as f32.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Result};
use crate::tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Which GELU formula to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluVariant {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    Tanh,
    /// `x * Phi(x)` with the exact error function.
    Erf,
}

impl GeluVariant {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            GeluVariant::Tanh => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            GeluVariant::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        }
    }

    /// d gelu / dx
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            GeluVariant::Tanh => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            GeluVariant::Erf => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn gelu(x: &Tensor, variant: GeluVariant) -> Tensor {
    x.map(|v| variant.eval(v as f64) as f32)
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    x.map(|v| silu(v as f64) as f32)
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = x.last_dim();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            sum += e;
            e
        })
        .collect();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Layer normalization over the last dimension followed by the affine
/// `gamma * xhat + beta`.
pub fn layernorm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    ensure_dim!(d > 0, "layernorm over an empty last dimension");
    ensure_dim!(
        gamma.len() == d && beta.len() == d,
        "layernorm params have lengths {}/{}, expected {}",
        gamma.len(),
        beta.len(),
        d
    );
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        layernorm_row(row, gamma, beta, eps);
    }
    Ok(out)
}

pub(crate) fn layernorm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    let inv = 1.0 / (var + eps).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = ((*v as f64 - mean) * inv * g as f64 + b as f64) as f32;
    }
}

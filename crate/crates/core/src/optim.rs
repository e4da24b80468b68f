//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// One AdamW update of `param`, returning the new parameter and state.
pub fn adamw_step(
    name: &str,
    param: &Tensor,
    grad: &Tensor,
    state: &AdamWState,
    hyper: &AdamWHyper,
) -> Result<(Tensor, AdamWState)> {
    let mut p = param.clone();
    let mut s = state.clone();
    adamw_update(name, &mut p, grad, &mut s, hyper)?;
    Ok((p, s))
}

/// In-place form of [`adamw_step`].
pub fn adamw_update(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.m.shape()
        || param.shape() != state.v.shape()
    {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !(hyper.lr > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {}",
            hyper.lr
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p = *p * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Hyper(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Hyper(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Hyper(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Hyper("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Tensors whose `trainable` flag is false
/// keep both their values and their moments.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    trainable: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(mask) = trainable {
        if mask.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: trainable mask has {} entries for {} params",
                mask.len(),
                params.len()
            )));
        }
    }
    for (i, ((p, g), (m, v))) in params
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(&state.v))
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "adam: param {i} is {:?} but grad is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(hyper.beta1);
    let b2 = T::from_f64_lossy(hyper.beta2);
    let one = T::one();
    let correction1 = T::from_f64_lossy(1.0 - hyper.beta1.powi(t));
    let correction2 = T::from_f64_lossy(1.0 - hyper.beta2.powi(t));
    let lr = T::from_f64_lossy(hyper.learning_rate);
    let eps = T::from_f64_lossy(hyper.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        if trainable.is_some_and(|mask| !mask[i]) {
            continue;
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (one - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (one - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / correction1;
            let v_hat = vj / correction2;
            *pj = *pj - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};
use crate::model::{GradientSet, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments for an ordered list of tensors, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = tensors.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    pub fn for_params(params: &ModelParams<T>) -> Self {
        Self::for_tensors(params.tensors())
    }

    /// One decoupled-weight-decay Adam update, in place.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor<T>>,
        grads: Vec<&Tensor<T>>,
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DeptError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(DeptError::ShapeMismatch(format!(
                    "param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        if !(lr >= 0.0) {
            return Err(DeptError::InvalidArgument(format!("learning rate {lr} must be >= 0")));
        }
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let one = T::one();
        let bc1 = one - T::of(cfg.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let bc2 = one - T::of(cfg.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let lr_t = T::of(lr);
        let decay = one - T::of(lr * cfg.weight_decay);
        let eps = T::of(cfg.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((x, &gi), mi), vi) in it {
                *x *= decay;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                if m_hat != T::zero() {
                    *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Functional form: returns updated parameters and state.
pub fn adamw_step<T: Scalar>(
    params: &ModelParams<T>,
    grads: &GradientSet<T>,
    state: &AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(ModelParams<T>, AdamWState<T>)> {
    params.check_congruent(grads)?;
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(p.tensors_mut(), grads.tensors(), lr, cfg)?;
    Ok((p, s))
}

/// Scales the tensors so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_tensors<T: Scalar>(tensors: Vec<&mut Tensor<T>>, max_norm: f64) -> f64 {
    let norm = tensors.iter().map(|t| t.sum_sq().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        tensors.into_iter().for_each(|t| t.scale(s));
    }
    norm
}

pub fn clip_grad_norm<T: Scalar>(grads: &mut GradientSet<T>, max_norm: f64) -> f64 {
    clip_tensors(grads.tensors_mut(), max_norm)
}

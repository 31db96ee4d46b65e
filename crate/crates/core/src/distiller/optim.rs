//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::networks::NetworkHandle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `base_lr · factor^-⌊iter/every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr(&self, iter: usize) -> f64 {
        self.base_lr * self.factor.powi(-((iter / self.every.max(1)) as i32))
    }
}

pub struct Adam<T> {
    params: AdamParams,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &NetworkHandle<T>, params: AdamParams) -> Self {
        let zeros = || {
            net.params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            params,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with gradients in parameter order. Parameters without a
    /// gradient are left untouched.
    pub fn step(
        &mut self,
        net: &mut NetworkHandle<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        let params = net.params_mut()?;
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

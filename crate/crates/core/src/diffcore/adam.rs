//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One Adam update over every parameter. Parameters without a gradient
    /// entry are treated as having a zero gradient (moments still decay).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), DiffError> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (name, value) in params.iter_mut() {
            let zero;
            let grad = match grads.get(name) {
                Some(g) => {
                    if g.shape() != value.shape() {
                        return Err(DiffError::Shape(format!(
                            "gradient for '{name}' has shape {}x{}, parameter is {}x{}",
                            g.shape().0,
                            g.shape().1,
                            value.shape().0,
                            value.shape().1
                        )));
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(value.rows(), value.cols());
                    &zero
                }
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
            if m.shape() != value.shape() {
                return Err(DiffError::Shape(format!(
                    "moment for '{name}' has stale shape"
                )));
            }
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                value.data_mut()[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

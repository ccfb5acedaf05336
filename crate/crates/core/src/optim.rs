//! Adam with bias correction.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Zeroed moment buffers shaped like `params`.
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` is the gradient of `params.tensors()[i]`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            );
        }
        for (i, (name, p)) in params.iter().enumerate() {
            let g = grads[i].ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return shape_err(
                    "adam_step",
                    format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape()),
                );
            }
            g.check_finite(&format!("gradient of `{name}`"))?;
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].expect("checked above").data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: MlpParams,
    pub second_moment: MlpParams,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam step. Parameters are left untouched when the
    /// gradients are rejected.
    pub fn update(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first_moment) {
            return Err(Error::shape(
                "adam update",
                format!("{} parameters", self.first_moment.num_params()),
                format!("{} params / {} grads", params.num_params(), grads.num_params()),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("adam gradients".into()));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let moments = self.first_moment.iter_mut().zip(self.second_moment.iter_mut());
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

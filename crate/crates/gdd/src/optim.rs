//! Adam with bias-corrected moment estimates.

use crate::autodiff::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One update over every parameter in the store, consuming the accumulated
/// gradients and zeroing them afterwards. Each parameter keeps its own step
/// counter, so parameters added later are bias-corrected from their own
/// first update.
pub fn adam_step(store: &mut ParamStore, config: &AdamConfig) {
    for param in store.params_mut() {
        param.step += 1;
        let t = param.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let grad = param.grad.data();
        for (i, value) in param.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            param.m[i] = config.beta1 * param.m[i] + (1.0 - config.beta1) * g;
            param.v[i] = config.beta2 * param.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = param.m[i] / bc1;
            let v_hat = param.v[i] / bc2;
            *value -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
        param.grad.data_mut().fill(0.0);
    }
}

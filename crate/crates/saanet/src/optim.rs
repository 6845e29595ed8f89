//! Adaptive-moment optimizer with decoupled weight decay.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW over a fixed parameter list. Weight decay is decoupled from the
/// gradient and skipped for rank-≤1 parameters (biases, norm scales/shifts).
pub struct AdamW {
    cfg: OptimConfig,
    /// First and second moment per parameter, in list order.
    state: Vec<(Vec<f64>, Vec<f64>)>,
    t: u64,
    n_params: usize,
}

impl AdamW {
    /// Replaces the learning rate for subsequent steps (for schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn new(params: &[(String, Tensor)], cfg: OptimConfig) -> Self {
        AdamW {
            state: params
                .iter()
                .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect(),
            cfg,
            t: 0,
            n_params: params.len(),
        }
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. A parameter with no gradient this step contributes a zero
    /// gradient (its moments still decay).
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::Contract(format!(
                "optimizer was built for {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let OptimConfig {
            learning_rate: lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            grad_clip: _,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((_, p), (m, v)) in params.iter().zip(&mut self.state) {
            let grad = p.grad();
            let grad = grad.as_deref().unwrap_or(&[]);
            let decay = if p.shape().len() > 1 { weight_decay } else { 0.0 };
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad.get(i).copied().unwrap_or(0.0);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * data[i]);
            }
            p.set_data(&data);
        }
        Ok(())
    }

    /// Clears the gradients of every parameter.
    pub fn zero_grads(params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

/// Rescales the stored gradients so their global ℓ₂ norm is at most
/// `max_norm`; returns the norm measured before clipping. Keeps attention and
/// offset updates bounded, which protects the ReLU-terminated density head
/// from being knocked into the all-dead region by one outlier step.
pub fn clip_grad_norm(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    let squared: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = squared.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params {
            p.scale_grad(scale);
        }
    }
    norm
}

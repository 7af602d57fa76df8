//! Adam parameter updates with bias correction.

use super::{Tensor, TensorError};

/// Optimizer state: first/second moment estimates per parameter, aligned
/// with the caller's parameter ordering, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over every trainable parameter. Each must carry a
    /// populated gradient; gradients are zeroed afterwards.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (name, p)) in params.into_iter().enumerate() {
            if self.m.len() <= idx {
                self.m.push(vec![0.0; p.data.len()]);
                self.v.push(vec![0.0; p.data.len()]);
            }
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

//! Adam optimizer over a fixed parameter list.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam state for one parameter group. Moment buffers are positional: the
/// same tensors must be passed to every [`AdamState::step`] call, in order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count; bias correction uses `step + 1` internally.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// State sized for `params`, with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(lr: f64, params: &[Tensor]) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One bias-corrected Adam update. Parameters without a populated
    /// gradient are an error; call after a backward pass. Gradients are
    /// cleared on success so the next pass starts fresh.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Grad(format!(
                "adam state sized for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                Error::Grad(format!("parameter {idx} has no gradient; run backward first"))
            })?;
            if g.len() != self.m[idx].len() {
                return Err(Error::Grad(format!(
                    "parameter {idx} changed size since adam state was built"
                )));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            p.apply_update(|w| {
                for i in 0..w.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
        }
        self.step += 1;
        for p in params {
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        // Force a zero grad without a backward pass.
        let loss = p.mse(&p.detach()).unwrap();
        loss.backward().unwrap();
        let mut opt = AdamState::new(1e-3, std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.data_vec(), vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With constant gradient g, bias correction makes the first step
        // exactly lr · g/√(g²) = lr (up to eps).
        let p = Tensor::param(&[1], vec![5.0]).unwrap();
        let target = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let loss = p.mse(&target).unwrap();
        loss.backward().unwrap();
        let mut opt = AdamState::new(1e-3, std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p)).unwrap();
        let moved = 5.0 - p.data_vec()[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let t = Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap();
        let loss = a.mse(&t).unwrap().add(&b.mse(&t).unwrap()).unwrap();
        loss.backward().unwrap();
        let params = [a.clone(), b.clone()];
        let mut opt = AdamState::new(1e-2, &params);
        opt.step(&params).unwrap();
        assert_eq!(a.data_vec(), b.data_vec());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = AdamState::new(1e-3, std::slice::from_ref(&p));
        assert!(opt.step(std::slice::from_ref(&p)).is_err());
    }

    #[test]
    fn grads_are_cleared_after_step() {
        let p = Tensor::param(&[1], vec![3.0]).unwrap();
        let t = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        p.mse(&t).unwrap().backward().unwrap();
        let mut opt = AdamState::new(1e-3, std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert!(p.grad().is_none());
    }
}

//! Momentum SGD with L2 weight decay.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v <- momentum * v + grad + wd * param; param <- param - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let mut sgd = Sgd { lr: 0.0, momentum: momentum as f32, weight_decay: weight_decay as f32, velocity: Vec::new() };
        sgd.set_lr(lr)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(sgd)
    }

    pub fn lr(&self) -> f64 {
        self.lr as f64
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr as f32;
        Ok(())
    }

    /// Updates every parameter from its populated gradient slot. Velocity
    /// buffers are created zeroed on the first call.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, step given {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = param
                .grad()
                .ok_or_else(|| Error::Usage("parameter has no gradient".into()))?
                .to_vec();
            if grad.len() != vel.len() {
                return Err(dim_err!("gradient length {} vs velocity {}", grad.len(), vel.len()));
            }
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f32, grad: f32) -> Tensor {
        let mut t = Tensor::new([1], vec![value]).unwrap();
        t.set_grad(vec![grad]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut sgd = Sgd::new(0.1, 0.0, 0.0).unwrap();
        let mut ps = [param(1.0, 2.0)];
        sgd.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_with_fresh_velocity_is_noop() {
        let mut sgd = Sgd::new(0.1, 0.9, 0.0).unwrap();
        let mut ps = [param(1.5, 0.0)];
        sgd.step(&mut ps).unwrap();
        assert_eq!(ps[0].data()[0], 1.5);
    }

    #[test]
    fn momentum_unrolls_to_one_plus_one_point_nine() {
        let (lr, g) = (0.01f32, 0.5f32);
        let mut sgd = Sgd::new(lr as f64, 0.9, 0.0).unwrap();
        let mut ps = [param(0.0, g)];
        sgd.step(&mut ps).unwrap();
        sgd.step(&mut ps).unwrap();
        let displacement = -ps[0].data()[0];
        assert!((displacement - lr * g * 2.9).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut sgd = Sgd::new(0.5, 0.0, 0.1).unwrap();
        let mut ps = [param(2.0, 0.0)];
        sgd.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-7);
    }

    #[test]
    fn bad_hyperparameters_rejected() {
        assert!(matches!(Sgd::new(0.0, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(Sgd::new(-1.0, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(Sgd::new(0.1, 1.0, 0.0), Err(Error::Config(_))));
        let mut sgd = Sgd::new(0.1, 0.0, 0.0).unwrap();
        assert!(sgd.set_lr(f64::NAN).is_err());
    }
}

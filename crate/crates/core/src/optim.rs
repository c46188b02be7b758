use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with momentum: `v <- momentum * v - lr * grad; p <- p + v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    learning_rate: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    /// Registers one zero velocity buffer per parameter, in order.
    pub fn new<'a>(
        learning_rate: f32,
        momentum: f32,
        params: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let velocity = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update to `params` (same order as registration) and zeroes their grads.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer registered {} parameters, step received {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((name, p), v) in params.iter().zip(&self.velocity) {
            if p.numel() != v.len() {
                return Err(Error::shape("sgd_step", format!("`{name}` changed size")));
            }
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        for ((_, p), v) in params.into_iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((x, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel - self.learning_rate * g;
                *x += *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamMut;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient moving average.
    pub rho: f64,
    /// Added to `sqrt(v)` in the denominator.
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1), got {}", self.rho)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Squared-gradient accumulator for a single parameter tensor.
#[derive(Debug, Clone)]
pub struct RmsPropState<T: Scalar> {
    pub config: RmsPropConfig,
    pub v: Tensor<T>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(config: RmsPropConfig, like: &Tensor<T>) -> Self {
        RmsPropState {
            config,
            v: Tensor::zeros(like.shape().clone()),
        }
    }
}

/// One update: `v = rho v + (1 - rho) g^2`, `param -= lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut RmsPropState<T>) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.v.shape() {
        return Err(Error::shape(format!(
            "rmsprop: parameter {}, gradient {} and accumulator {} must match",
            param.shape(),
            grad.shape(),
            state.v.shape()
        )));
    }
    let lr = T::from_f64(state.config.learning_rate);
    let rho = T::from_f64(state.config.rho);
    let one_minus_rho = T::from_f64(1.0 - state.config.rho);
    let eps = T::from_f64(state.config.epsilon);
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(state.v.data_mut()) {
        *v = rho * *v + one_minus_rho * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// RMSProp over every parameter of a model, one accumulator per tensor in
/// parameter order.
#[derive(Debug, Clone)]
pub struct RmsProp<T: Scalar> {
    config: RmsPropConfig,
    slots: Vec<RmsPropState<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig) -> Result<Self> {
        config.validate()?;
        Ok(RmsProp {
            config,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = ParamMut<'a, T>>) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            if i == self.slots.len() {
                self.slots.push(RmsPropState::new(self.config, p.value));
            }
            rmsprop_step(p.value, p.grad, &mut self.slots[i])?;
        }
        Ok(())
    }
}

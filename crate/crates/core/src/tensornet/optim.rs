use super::graph::ParamSet;
use super::tensor::Scalar;
use crate::error::{invalid, Result};

/// One momentum-SGD update over flat slices:
/// `v <- momentum * v + g`, then `p <- p - lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid!("sgd over {} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum SGD holding one velocity buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: ParamSet<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: T) -> Self {
        Self { momentum, velocity: ParamSet::zeros_like(params) }
    }

    pub fn from_velocity(velocity: ParamSet<T>, momentum: T) -> Self {
        Self { momentum, velocity }
    }

    pub fn velocity(&self) -> &ParamSet<T> {
        &self.velocity
    }

    /// Update every layer whose index passes `trainable`; other layers and
    /// their velocities are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &ParamSet<T>,
        lr: T,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if params.0.len() != grads.0.len() || params.0.len() != self.velocity.0.len() {
            return Err(invalid!("optimizer state does not match the parameter layout"));
        }
        for (i, ((p, g), v)) in params.0.iter_mut().zip(&grads.0).zip(self.velocity.0.iter_mut()).enumerate() {
            let (Some(p), Some(g), Some(v)) = (p.as_mut(), g.as_ref(), v.as_mut()) else {
                continue;
            };
            if !trainable(i) {
                continue;
            }
            sgd_step(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), lr, self.momentum)?;
            sgd_step(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, self.momentum)?;
        }
        Ok(())
    }
}

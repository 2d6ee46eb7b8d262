use serde::{Deserialize, Serialize};

use super::{DenseNet, GradientSet, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity(GradientSet);

impl Velocity {
    pub fn new(net: &DenseNet) -> Self {
        Velocity(GradientSet::zeros_like(net))
    }
}

/// One momentum SGD update:
/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
/// Masked weights are forced back to zero together with their velocity.
pub fn sgd_step(
    net: &mut DenseNet,
    grads: &GradientSet,
    cfg: &SgdConfig,
    velocity: &mut Velocity,
) -> Result<()> {
    grads.check_shapes(net)?;
    velocity.0.check_shapes(net)?;
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for ((layer, g), v) in net
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.0.layers)
    {
        update(
            layer.weight.as_mut_slice(),
            g.weight.as_slice(),
            v.weight.as_mut_slice(),
            lr,
            mu,
            wd,
        );
        update(&mut layer.bias, &g.bias, &mut v.bias, lr, mu, wd);
        if let Some(mask) = &layer.mask {
            zero_masked(&mut v.weight, mask);
        }
        layer.apply_mask();
    }
    Ok(())
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + (g + wd * *w);
        *w -= lr * *v;
    }
}

fn zero_masked(m: &mut Matrix, mask: &Matrix) {
    for (x, k) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if *k == 0.0 {
            *x = 0.0;
        }
    }
}

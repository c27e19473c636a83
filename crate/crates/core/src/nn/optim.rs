//! SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl Sgd {
    pub fn step(&self, mlp: &mut Mlp, grads: &Gradients, velocity: &mut Gradients) -> Result<()> {
        sgd_step(mlp, grads, velocity, self.lr, self.momentum)
    }
}

/// `v <- momentum * v + g`, then `theta <- theta - lr * v`.
pub fn sgd_step(
    mlp: &mut Mlp,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grads.matches(mlp) || !velocity.matches(mlp) {
        return Err(Error::Shape("gradient / velocity shape differs from the Mlp".into()));
    }
    for ((layer, g), v) in mlp
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((w, &gw), vw) in layer
            .weight
            .as_mut_slice()
            .iter_mut()
            .zip(g.weight.as_slice())
            .zip(v.weight.as_mut_slice())
        {
            *vw = momentum * *vw + gw;
            *w -= lr * *vw;
        }
        for ((b, &gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = momentum * *vb + gb;
            *b -= lr * *vb;
        }
    }
    Ok(())
}

//! Perceptron stacks with a hand-written backward pass, losses and SGD.
//!
//! Weights are stored `out x in`, so a layer computes `y = act(x W^T + b)`
//! row by row for a batch `x` of shape `B x in`.

pub mod loss;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use loss::{
    det_loss, focal_loss, seg_loss, smooth_l1, softmax_in_place, total_loss, vote_loss, BoxTarget,
    DetLossParams, LossReport,
};
pub use optim::{sgd_step, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu derivative at exactly zero is taken as 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Everything `backward` needs from the matching `forward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }

    /// Sign pattern of every relu pre-activation; two evaluations on the
    /// same side of every kink produce equal patterns.
    pub fn relu_pattern(&self, mlp: &Mlp) -> Vec<bool> {
        let mut pat = Vec::new();
        for (layer, z) in mlp.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                pat.extend(z.as_slice().iter().map(|&v| v > 0.0));
            }
        }
        pat
    }

    /// True if some relu pre-activation is exactly zero.
    pub fn touches_kink(&self, mlp: &Mlp) -> bool {
        mlp.layers
            .iter()
            .zip(&self.pre)
            .any(|(l, z)| l.activation == Activation::Relu && z.as_slice().contains(&0.0))
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an Mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_width() {
                return Err(Error::Shape(format!("layer {i}: bias length")));
            }
            if i > 0 && layers[i - 1].out_width() != l.in_width() {
                return Err(Error::WidthMismatch {
                    context: "layer chain",
                    expected: layers[i - 1].out_width(),
                    got: l.in_width(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Zero-initialised stack. `widths` has one more entry than `acts`.
    pub fn zeros(widths: &[usize], acts: &[Activation]) -> Self {
        assert_eq!(widths.len(), acts.len() + 1, "widths / activations");
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &activation)| Layer {
                weight: Matrix::zeros(widths[i + 1], widths[i]),
                bias: vec![0.0; widths[i + 1]],
                activation,
            })
            .collect();
        Self { layers }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], acts: &[Activation], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(widths, acts);
        for l in &mut mlp.layers {
            let bound = (6.0 / (l.in_width() + l.out_width()) as f64).sqrt();
            for w in l.weight.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
        }
        mlp
    }

    /// Single identity layer of width `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Matrix::identity(n),
                bias: vec![0.0; n],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_width()];
        w.extend(self.layers.iter().map(Layer::out_width));
        w
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(l.weight.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an Mlp holding {}",
                p.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&p[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for l in &self.layers {
            let (_, a) = layer_forward(l, &cur);
            cur = a;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (z, a) = layer_forward(l, &cur);
            inputs.push(cur);
            pre.push(z);
            outputs.push(a.clone());
            cur = a;
        }
        Ok((
            cur,
            ForwardCache {
                inputs,
                pre,
                outputs,
            },
        ))
    }

    /// Reverse-mode pass: parameter gradients and `dL/dX` for upstream
    /// gradient `dy = dL/dY`.
    pub fn backward(&self, cache: &ForwardCache, dy: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.pre.len() != self.layers.len()
            || cache
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.cols() != l.out_width())
        {
            return Err(Error::Shape("forward cache does not match this Mlp".into()));
        }
        let out = cache.output();
        if dy.rows() != out.rows() || dy.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} for output {}x{}",
                dy.rows(),
                dy.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dy.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            let a = &cache.outputs[li];
            let x = &cache.inputs[li];
            for (d, (&zv, &av)) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(z.as_slice().iter().zip(a.as_slice()))
            {
                *d *= l.activation.derivative(zv, av);
            }
            let g = &mut grads.layers[li];
            let in_w = l.in_width();
            let mut dx = Matrix::zeros(x.rows(), in_w);
            for b in 0..x.rows() {
                let dz = delta.row(b);
                let xr = x.row(b);
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo == 0.0 {
                        continue;
                    }
                    g.bias[o] += dzo;
                    let gw = g.weight.row_mut(o);
                    for (gwk, &xk) in gw.iter_mut().zip(xr) {
                        *gwk += dzo * xk;
                    }
                    let wr = l.weight.row(o);
                    for (dxk, &wk) in dx.row_mut(b).iter_mut().zip(wr) {
                        *dxk += dzo * wk;
                    }
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_width() {
            return Err(Error::WidthMismatch {
                context: "mlp input",
                expected: self.in_width(),
                got: x.cols(),
            });
        }
        Ok(())
    }
}

fn layer_forward(l: &Layer, x: &Matrix) -> (Matrix, Matrix) {
    let out_w = l.out_width();
    let mut z = Matrix::zeros(x.rows(), out_w);
    for b in 0..x.rows() {
        let xr = x.row(b);
        let zr = z.row_mut(b);
        for (o, zo) in zr.iter_mut().enumerate() {
            let mut s = l.bias[o];
            for (&w, &xv) in l.weight.row(o).iter().zip(xr) {
                s += w * xv;
            }
            *zo = s;
        }
    }
    let mut a = z.clone();
    a.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = l.activation.apply(*v));
    (z, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter-shaped buffer: gradients or optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_width(), l.in_width()),
                    bias: vec![0.0; l.out_width()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self.layers.iter().zip(&mlp.layers).all(|(g, l)| {
                g.weight.rows() == l.weight.rows()
                    && g.weight.cols() == l.weight.cols()
                    && g.bias.len() == l.bias.len()
            })
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Same layout as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for l in &self.layers {
            p.extend_from_slice(l.weight.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        let n: usize = self
            .layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum();
        if p.len() != n {
            return Err(Error::Shape(format!("{} values for {n} slots", p.len())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&p[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum()
    }
}

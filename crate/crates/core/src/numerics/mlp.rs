use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{add_outer, matvec, matvec_t, relu};
use super::params::{nested, ParamTree};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer, `y = W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (out, _) = weight.dims2("linear")?;
        if bias.shape() != [out] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Tensor::zeros([out, inp]),
            bias: Tensor::zeros([out]),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn random(inp: usize, out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Tensor::from_fn([out, inp], |_| S::from_f64(normal.sample(rng))),
            bias: Tensor::zeros([out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        let mut y = matvec(&self.weight, x)?;
        y.iter_mut()
            .zip(self.bias.data())
            .for_each(|(v, &b)| *v = *v + b);
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[S], dy: &[S], grad: &mut Linear<S>) -> Result<Vec<S>> {
        add_outer(&mut grad.weight, dy, x);
        grad.bias
            .data_mut()
            .iter_mut()
            .zip(dy)
            .for_each(|(g, &d)| *g = *g + d);
        matvec_t(&self.weight, dy)
    }

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
}

/// Linear layers with rectified-linear activations between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S = f32> {
    pub layers: Vec<Linear<S>>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<S> {
    /// Input to each layer.
    inputs: Vec<Vec<S>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<S>>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn new(layers: Vec<Linear<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer {} outputs {} but layer {} takes {}",
                        k,
                        pair[0].out_dim(),
                        k + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Two-layer projection `in → hidden → out`.
    pub fn two_layer(inp: usize, hidden: usize, out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            layers: vec![
                Linear::random(inp, hidden, std, rng),
                Linear::random(hidden, out, std, rng),
            ],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[S]) -> Result<(Vec<S>, MlpCache<S>)> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input length {} but first layer takes {}", x.len(), self.in_dim()),
            ));
        }
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if k + 1 < self.layers.len() {
                z.iter().map(|&v| relu(v)).collect()
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp_forward".into()));
        }
        Ok((h, cache))
    }

    /// Accumulates gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<S>, dy: &[S], grad: &mut MlpParams<S>) -> Result<Vec<S>> {
        let mut d = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                d.iter_mut()
                    .zip(&cache.pre[k])
                    .for_each(|(g, &z)| {
                        if z <= S::zero() {
                            *g = S::zero();
                        }
                    });
            }
            d = self.layers[k].backward(&cache.inputs[k], &d, &mut grad.layers[k])?;
        }
        Ok(d)
    }
}

impl<S: Scalar> ParamTree for MlpParams<S> {
    type Elem = S;

    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| nested(&format!("layers.{k}"), l.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl<S: Scalar> ParamTree for Linear<S> {
    type Elem = S;

    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.named()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

use rand::Rng;

use super::{glorot, PRelu};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvSpec, Real, Tensor,
};

/// Convolution (plain or transposed) with an optional PReLU after it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub prelu: Option<PRelu<T>>,
}

/// Intermediate values one forward pass leaves for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    pub input: Tensor<T>,
    pub pre_activation: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvLayerGrads {
    pub weights: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub alpha: Option<Tensor<f64>>,
}

pub const PRELU_INIT: f64 = 0.25;

impl<T: Real> ConvLayer<T> {
    pub fn zeros(spec: ConvSpec, transposed: bool, activation: bool) -> Result<Self> {
        spec.validate()?;
        let out_c = if transposed { spec.in_channels } else { spec.out_channels };
        Ok(Self {
            spec,
            transposed,
            weights: Tensor::zeros(&spec.weight_shape())?,
            bias: Tensor::zeros(&[out_c])?,
            prelu: if activation { Some(PRelu::new(out_c, PRELU_INIT)?) } else { None },
        })
    }

    /// Glorot-uniform weights, zero bias, PReLU slopes at 0.25.
    pub fn init(spec: ConvSpec, transposed: bool, activation: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut layer = Self::zeros(spec, transposed, activation)?;
        let taps = spec.kernel_h * spec.kernel_w;
        let (fan_in, fan_out) = if transposed {
            (taps * spec.out_channels, taps * spec.in_channels)
        } else {
            (taps * spec.in_channels, taps * spec.out_channels)
        };
        glorot(&mut layer.weights, fan_in, fan_out, rng);
        Ok(layer)
    }

    pub fn in_channels(&self) -> usize {
        if self.transposed { self.spec.out_channels } else { self.spec.in_channels }
    }

    pub fn out_channels(&self) -> usize {
        if self.transposed { self.spec.in_channels } else { self.spec.out_channels }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.transposed {
            self.spec.transposed_output_hw(h, w)
        } else {
            self.spec.output_hw(h, w)
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let pre = if self.transposed {
            conv_transpose2d_forward(input, &self.weights, &self.bias, &self.spec)?
        } else {
            conv2d_forward(input, &self.weights, &self.bias, &self.spec)?
        };
        let out = match &self.prelu {
            Some(p) => p.forward(&pre)?,
            None => pre.clone(),
        };
        Ok((
            out,
            ConvCache {
                input: input.clone(),
                pre_activation: pre,
            },
        ))
    }

    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, ConvLayerGrads)> {
        let (grad_pre, alpha) = match &self.prelu {
            Some(p) => {
                let (g, a) = p.backward(&cache.pre_activation, grad_out)?;
                (g, Some(a))
            }
            None => {
                if grad_out.shape() != cache.pre_activation.shape() {
                    return Err(Error::Shape(format!(
                        "conv layer grad {:?} vs output {:?}",
                        grad_out.shape(),
                        cache.pre_activation.shape()
                    )));
                }
                (grad_out.clone(), None)
            }
        };
        let g = if self.transposed {
            conv_transpose2d_backward(&cache.input, &self.weights, &self.spec, &grad_pre)?
        } else {
            conv2d_backward(&cache.input, &self.weights, &self.spec, &grad_pre)?
        };
        Ok((
            g.input,
            ConvLayerGrads {
                weights: g.weights,
                bias: g.bias,
                alpha,
            },
        ))
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("weights", &self.weights), ("bias", &self.bias)];
        if let Some(p) = &self.prelu {
            v.push(("alpha", &p.alpha));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("weights", &mut self.weights), ("bias", &mut self.bias)];
        if let Some(p) = &mut self.prelu {
            v.push(("alpha", &mut p.alpha));
        }
        v
    }
}

impl ConvLayerGrads {
    /// Gradients in the same order as [`ConvLayer::tensors`].
    pub fn into_tensors(self) -> Vec<Tensor<f64>> {
        let mut v = vec![self.weights, self.bias];
        v.extend(self.alpha);
        v
    }
}

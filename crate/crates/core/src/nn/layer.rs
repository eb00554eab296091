use std::hash::Hasher;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::{softmax, softmax_backward};
use super::spec::LayerSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dParams, PoolIndices, Tensor};

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Tensor<T>,
    pub(crate) velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            value,
            grad: zeros.clone(),
            velocity: zeros,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    pub fn velocity(&self) -> &Tensor<T> {
        &self.velocity
    }

    fn set_grad(&mut self, grad: Tensor<T>) {
        debug_assert_eq!(grad.shape(), self.value.shape());
        self.grad = grad;
    }
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-limit..limit))).expect("positive shape")
}

fn missing_cache(kind: &str) -> Error {
    Error::InvalidArgument(format!("{kind}: backward called without a cached forward pass"))
}

/// An instantiated layer. Caches from the last [`Layer::forward`] feed
/// [`Layer::backward`].
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d {
        weight: Param<T>,
        bias: Param<T>,
        params: Conv2dParams,
        input: Option<Tensor<T>>,
    },
    Dense {
        weight: Param<T>,
        bias: Param<T>,
        input: Option<Tensor<T>>,
    },
    Relu {
        input: Option<Tensor<T>>,
    },
    MaxPool2d {
        indices: Option<PoolIndices>,
    },
    Dropout {
        p: f64,
        mask: Option<Tensor<T>>,
    },
    Flatten {
        input_shape: Option<Vec<usize>>,
    },
    Softmax {
        output: Option<Tensor<T>>,
    },
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer for a per-sample `input_shape`. Weights are He-uniform
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), biases zero.
    pub fn init(spec: &LayerSpec, input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.output_shape(input_shape)?;
        Ok(match *spec {
            LayerSpec::Conv2d {
                filters,
                kernel,
                padding,
                stride,
            } => {
                let channels = input_shape[0];
                let fan_in = channels * kernel * kernel;
                Layer::Conv2d {
                    weight: Param::new(he_uniform(
                        &[filters, channels, kernel, kernel],
                        fan_in,
                        rng,
                    )),
                    bias: Param::new(Tensor::zeros(&[filters])),
                    params: Conv2dParams { padding, stride },
                    input: None,
                }
            }
            LayerSpec::Dense { units } => {
                let fan_in = input_shape[0];
                Layer::Dense {
                    weight: Param::new(he_uniform(&[fan_in, units], fan_in, rng)),
                    bias: Param::new(Tensor::zeros(&[units])),
                    input: None,
                }
            }
            LayerSpec::Relu => Layer::Relu { input: None },
            LayerSpec::MaxPool2d => Layer::MaxPool2d { indices: None },
            LayerSpec::Dropout { p } => Layer::Dropout { p, mask: None },
            LayerSpec::Flatten => Layer::Flatten { input_shape: None },
            LayerSpec::Softmax => Layer::Softmax { output: None },
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu { .. } => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten { .. } => "flatten",
            Layer::Softmax { .. } => "softmax",
        }
    }

    /// Forward pass that records what backward needs. Dropout masks are drawn
    /// from `rng` only when `training` is set.
    pub fn forward(&mut self, x: Tensor<T>, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                params,
                input,
            } => {
                let y = tensor::conv2d_forward(&x, &weight.value, &bias.value, *params)?;
                *input = Some(x);
                Ok(y)
            }
            Layer::Dense {
                weight,
                bias,
                input,
            } => {
                let y = dense_forward(&x, &weight.value, &bias.value)?;
                *input = Some(x);
                Ok(y)
            }
            Layer::Relu { input } => {
                let y = tensor::relu(&x)?;
                *input = Some(x);
                Ok(y)
            }
            Layer::MaxPool2d { indices } => {
                let (y, idx) = tensor::maxpool2d_forward(&x)?;
                *indices = Some(idx);
                Ok(y)
            }
            Layer::Dropout { p, mask } => {
                if !training || *p == 0.0 {
                    *mask = None;
                    return Ok(x);
                }
                let keep = T::lit(1.0 / (1.0 - *p));
                let m = Tensor::from_fn(x.shape(), |_| {
                    if rng.gen::<f64>() < *p {
                        T::zero()
                    } else {
                        keep
                    }
                })?;
                let y = tensor::hadamard(&x, &m)?;
                *mask = Some(m);
                Ok(y)
            }
            Layer::Flatten { input_shape } => {
                *input_shape = Some(x.shape().to_vec());
                let b = x.shape()[0];
                let w = x.row_len();
                x.reshape(&[b, w])
            }
            Layer::Softmax { output } => {
                let y = softmax(&x)?;
                *output = Some(y.clone());
                Ok(y)
            }
        }
    }

    /// Inference-mode forward pass without caching; dropout is the identity.
    /// When `signature` is given, the discrete decisions of the pass (ReLU
    /// gates and max-pool winners) are fed into it.
    pub fn infer<'h>(&self, x: Tensor<T>, signature: Option<&mut (dyn Hasher + 'h)>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                params,
                ..
            } => tensor::conv2d_forward(&x, &weight.value, &bias.value, *params),
            Layer::Dense { weight, bias, .. } => dense_forward(&x, &weight.value, &bias.value),
            Layer::Relu { .. } => {
                if let Some(h) = signature {
                    for chunk in x.data().chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i));
                        h.write_u64(bits);
                    }
                }
                tensor::relu(&x)
            }
            Layer::MaxPool2d { .. } => {
                let (y, idx) = tensor::maxpool2d_forward(&x)?;
                if let Some(h) = signature {
                    for &w in idx.winners() {
                        h.write_usize(w);
                    }
                }
                Ok(y)
            }
            Layer::Dropout { .. } => Ok(x),
            Layer::Flatten { .. } => {
                let b = x.shape()[0];
                let w = x.row_len();
                x.reshape(&[b, w])
            }
            Layer::Softmax { .. } => softmax(&x),
        }
    }

    /// Back-propagates `grad` (gradient w.r.t. this layer's output), storing
    /// parameter gradients and returning the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                params,
                input,
            } => {
                let x = input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
                let g = tensor::conv2d_backward(&grad, x, &weight.value, *params)?;
                weight.set_grad(g.kernels);
                bias.set_grad(g.bias);
                Ok(g.input)
            }
            Layer::Dense {
                weight,
                bias,
                input,
            } => {
                let x = input.as_ref().ok_or_else(|| missing_cache("dense"))?;
                weight.set_grad(tensor::matmul_at_b(x, &grad)?);
                let units = bias.value.len();
                let mut gb = vec![T::zero(); units];
                for row in grad.data().chunks_exact(units) {
                    for (acc, &g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                bias.set_grad(Tensor::new(&[units], gb)?);
                tensor::matmul_a_bt(&grad, &weight.value)
            }
            Layer::Relu { input } => {
                let x = input.as_ref().ok_or_else(|| missing_cache("relu"))?;
                tensor::relu_backward(x, &grad)
            }
            Layer::MaxPool2d { indices } => {
                let idx = indices.as_ref().ok_or_else(|| missing_cache("maxpool2d"))?;
                tensor::maxpool2d_backward(&grad, idx)
            }
            Layer::Dropout { mask, .. } => match mask {
                Some(m) => tensor::hadamard(&grad, m),
                None => Ok(grad),
            },
            Layer::Flatten { input_shape } => {
                let shape = input_shape.as_ref().ok_or_else(|| missing_cache("flatten"))?;
                grad.reshape(shape)
            }
            Layer::Softmax { output } => {
                let y = output.as_ref().ok_or_else(|| missing_cache("softmax"))?;
                softmax_backward(y, &grad)
            }
        }
    }

    /// Named trainable tensors (`weight`, `bias`) in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => vec![],
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d { input, .. } | Layer::Dense { input, .. } | Layer::Relu { input } => {
                *input = None
            }
            Layer::MaxPool2d { indices } => *indices = None,
            Layer::Dropout { mask, .. } => *mask = None,
            Layer::Flatten { input_shape } => *input_shape = None,
            Layer::Softmax { output } => *output = None,
        }
    }
}

// y = x W + b, x: [B, in], W: [in, out]
fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = tensor::matmul(x, w)?;
    let units = b.len();
    for row in y.data_mut().chunks_exact_mut(units) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn he_uniform_bounds_and_zero_bias() {
        let layer: Layer<f64> = Layer::init(&LayerSpec::Dense { units: 4 }, &[24], &mut rng()).unwrap();
        let limit = (6.0f64 / 24.0).sqrt();
        let params = layer.params();
        assert!(params[0].1.value().data().iter().all(|v| v.abs() < limit));
        assert!(params[1].1.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut layer: Layer<f64> = Layer::init(&LayerSpec::Dropout { p: 0.5 }, &[8], &mut rng()).unwrap();
        let x = Tensor::from_fn(&[3, 8], |i| i as f64).unwrap();
        assert_eq!(layer.forward(x.clone(), false, &mut rng()).unwrap(), x);
        assert_eq!(layer.infer(x.clone(), None).unwrap(), x);
    }

    #[test]
    fn dropout_training_preserves_expectation() {
        let mut layer: Layer<f64> = Layer::init(&LayerSpec::Dropout { p: 0.25 }, &[1], &mut rng()).unwrap();
        let n = 200_000;
        let x = Tensor::full(&[n, 1], 1.0);
        let y = layer.forward(x, true, &mut rng()).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        // sd of the mean is sqrt(p/(1-p)/n) ~ 0.0013
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.75).abs() < 0.01);
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut layer: Layer<f64> = Layer::init(&LayerSpec::Relu, &[2], &mut rng()).unwrap();
        assert!(layer.backward(Tensor::zeros(&[1, 2])).is_err());
    }
}

use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, Param};
use super::loss::{cross_entropy, softmax_cross_entropy_grad};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minibatch SGD with heavy-ball momentum:
/// `v <- momentum * v + g`, `w <- w - learning_rate * v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

// Stream of the ChaCha generator reserved for dropout masks; stream 0 is
// used for parameter initialization.
const DROPOUT_STREAM: u64 = 1;

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    rng
}

/// An instantiated [`NetworkSpec`]: layers with parameters, plus the dropout
/// random stream.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> Network<T> {
    /// Instantiates `spec` with parameters drawn deterministically from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut input = spec.input_shape.clone();
        for (layer, out) in spec.layers.iter().zip(shapes) {
            layers.push(Layer::init(layer, &input, &mut rng)?);
            input = out;
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            dropout_rng: dropout_rng(seed),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|(_, _, p)| p.value().len()).sum()
    }

    /// Every trainable tensor as `(layer index, name, param)`.
    pub fn params(&self) -> impl Iterator<Item = (usize, &'static str, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (i, n, p)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (usize, &'static str, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, p)| (i, n, p)))
    }

    /// Restarts the dropout random stream, e.g. at an epoch boundary.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = dropout_rng(seed);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape()[1..] != self.spec.input_shape[..] {
            let mut want = vec![x.shape()[0]];
            want.extend(&self.spec.input_shape);
            return Err(Error::mismatch("network input", &want, x.shape()));
        }
        Ok(())
    }

    /// Full forward pass returning `[batch, classes]` probabilities, caching
    /// activations for [`Network::backward_logits`]. Dropout is active only
    /// when `training` is set.
    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(h, training, &mut self.dropout_rng)?;
        }
        Ok(h)
    }

    /// Inference-mode forward pass. Takes `&self`, so it can run concurrently.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_inner(x, None)
    }

    /// Like [`Network::predict`], also hashing the pattern of ReLU gates and
    /// max-pool winners into `signature`. Two inputs with equal signatures lie
    /// in the same linear region of the piecewise-linear part of the network.
    pub fn predict_with_signature(&self, x: &Tensor<T>, signature: &mut dyn Hasher) -> Result<Tensor<T>> {
        self.predict_inner(x, Some(signature))
    }

    fn predict_inner(&self, x: &Tensor<T>, mut signature: Option<&mut dyn Hasher>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(h, signature.as_deref_mut())?;
        }
        Ok(h)
    }

    /// [`Network::predict`] over consecutive chunks of at most `batch_size` rows.
    pub fn predict_batched(&self, x: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let batch_size = batch_size.max(1);
        if n <= batch_size {
            return self.predict(x);
        }
        let mut parts = Vec::with_capacity(n.div_ceil(batch_size));
        for start in (0..n).step_by(batch_size) {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            parts.push(self.predict(&x.select_rows(&idx)?)?);
        }
        Tensor::concat_rows(&parts)
    }

    /// Back-propagates a gradient taken w.r.t. the logits (the input of the
    /// final softmax) through every layer below it.
    pub fn backward_logits(&mut self, grad_logits: Tensor<T>) -> Result<()> {
        let below_head = self.layers.len() - 1;
        let mut g = grad_logits;
        for layer in self.layers[..below_head].iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(())
    }

    /// Forward, soft-target cross-entropy and backward; leaves gradients in
    /// the parameters and returns the loss.
    pub fn compute_gradients(&mut self, x: &Tensor<T>, targets: &Tensor<T>, training: bool) -> Result<T> {
        let probs = self.forward(x, training)?;
        let loss = cross_entropy(targets, &probs)?;
        let grad = softmax_cross_entropy_grad(&probs, targets)?;
        self.backward_logits(grad)?;
        Ok(loss)
    }

    pub fn apply_sgd(&mut self, sgd: &SgdConfig) {
        let lr = T::lit(sgd.learning_rate);
        let mu = T::lit(sgd.momentum);
        for (_, _, p) in self.params_mut() {
            let Param {
                value,
                grad,
                velocity,
            } = p;
            for ((w, v), &g) in value
                .data_mut()
                .iter_mut()
                .zip(velocity.data_mut())
                .zip(grad.data())
            {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }

    /// One optimization step on a minibatch; returns the pre-update loss.
    pub fn backward_and_step(&mut self, x: &Tensor<T>, targets: &Tensor<T>, sgd: &SgdConfig) -> Result<T> {
        let loss = self.compute_gradients(x, targets, true)?;
        let finite = self
            .params()
            .all(|(_, _, p)| p.grad().is_finite());
        if !finite {
            return Err(Error::NonFinite { op: "gradient" });
        }
        self.apply_sgd(sgd);
        for layer in &mut self.layers {
            layer.clear_cache();
        }
        Ok(loss)
    }
}

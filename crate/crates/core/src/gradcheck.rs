//! Finite-difference gradient verification.
//!
//! Every analytic gradient is compared against the central difference
//! `(f(x + h) - f(x - h)) / 2h` with the relative error
//!
//! ```text
//! |analytic - numeric| / max(|analytic| + |numeric|, 1e-6)
//! ```
//!
//! ReLU and max-pool are piecewise linear, so a perturbation that moves an
//! activation across a kink (or changes a pool winner) yields a meaningless
//! difference quotient. Each evaluation therefore also records the pass's
//! activation signature (ReLU gates and pool winners); coordinates whose
//! perturbed signatures differ from the unperturbed one are skipped and
//! counted.
//!
//! Layer checks use the scalar loss `sum(w * layer(x))` for a fixed random
//! `w`, so `w` is exactly the upstream gradient. Network checks use the
//! soft-target cross-entropy of the whole model.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{cross_entropy, softmax, softmax_cross_entropy_grad, Layer, LayerSpec, Network, NetworkSpec};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator, so that two near-zero values
/// compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates compared per tensor; larger tensors are sampled.
    pub checks_per_tensor: usize,
    /// Coordinates tried per tensor before giving up on reaching
    /// `checks_per_tensor` because of kink skips.
    pub attempts_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            checks_per_tensor: 8,
            attempts_per_tensor: 32,
            seed: 0,
        }
    }
}

/// Result for one gradient tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    /// Position in the network, when the check ran on a whole network.
    pub layer_index: Option<usize>,
    pub layer: String,
    /// `input`, `weight` or `bias`.
    pub target: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckEntry {
    pub fn name(&self) -> String {
        match self.layer_index {
            Some(i) => format!("layer {i} ({}) {}", self.layer, self.target),
            None => format!("{} {}", self.layer, self.target),
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Largest error per layer kind, in order of first appearance.
    pub fn per_layer_max(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(k, _)| *k == e.layer) {
                Some((_, m)) => *m = m.max(e.max_rel_error),
                None => out.push((e.layer.clone(), e.max_rel_error)),
            }
        }
        out
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} max rel err {:.3e}  ({} checked, {} skipped)  {}",
                e.name(),
                e.max_rel_error,
                e.checked,
                e.skipped,
                if e.passed(self.tolerance) { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `eval`, which returns
/// the loss and activation signature with coordinate `i` shifted by `delta`.
fn probe(
    layer_index: Option<usize>,
    layer: &str,
    target: &str,
    analytic: &Tensor<f64>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, u64)>,
) -> Result<GradCheckEntry> {
    let (_, base) = eval(0, 0.0)?;
    let n = analytic.len();
    let order = rand::seq::index::sample(rng, n, n.min(opts.attempts_per_tensor));
    let mut entry = GradCheckEntry {
        layer_index,
        layer: layer.to_string(),
        target: target.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for i in order {
        if entry.checked == opts.checks_per_tensor {
            break;
        }
        let (plus, s_plus) = eval(i, opts.step)?;
        let (minus, s_minus) = eval(i, -opts.step)?;
        if s_plus != base || s_minus != base {
            entry.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic.data()[i], numeric);
        entry.max_rel_error = entry.max_rel_error.max(if err.is_nan() { f64::INFINITY } else { err });
        entry.checked += 1;
    }
    Ok(entry)
}

fn shifted(x: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut y = x.clone();
    y.data_mut()[i] += delta;
    y
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("positive shape")
}

/// Rows drawn uniformly and normalized to sum to one.
pub fn random_simplex_rows(rows: usize, classes: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let raw = uniform(&[rows, classes], 0.01, 1.0, rng);
    let mut data = raw.into_data();
    for row in data.chunks_mut(classes) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(&[rows, classes], data).expect("positive shape")
}

/// Checks input and parameter gradients of one layer on input `x`.
/// Dropout masks are held fixed by replaying the same random stream.
pub fn check_layer(layer: &Layer<f64>, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mask_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let kind = layer.kind();

    let mut analytic = layer.clone();
    let y = analytic.forward(x.clone(), true, &mut mask_rng.clone())?;
    let w = uniform(y.shape(), -1.0, 1.0, &mut rng);
    let grad_input = analytic.backward(w.clone())?;

    let loss = |l: &Layer<f64>, x: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut h = DefaultHasher::new();
        l.infer(x.clone(), Some(&mut h))?;
        let y = l.clone().forward(x.clone(), true, &mut mask_rng.clone())?;
        let value = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok((value, h.finish()))
    };

    let mut entries = vec![probe(None, kind, "input", &grad_input, opts, &mut rng, |i, d| {
        loss(layer, &shifted(x, i, d))
    })?];
    for (k, (name, param)) in analytic.params().into_iter().enumerate() {
        let grad = param.grad().clone();
        entries.push(probe(None, kind, name, &grad, opts, &mut rng, |i, d| {
            let mut l = layer.clone();
            let mut params = l.params_mut();
            params[k].1.value_mut().data_mut()[i] += d;
            loss(&l, x)
        })?);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

/// Checks the fused softmax + cross-entropy gradient `(p - t) / B` against
/// differences of the composed loss with respect to the logits.
pub fn check_softmax_cross_entropy(logits: &Tensor<f64>, targets: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let analytic = softmax_cross_entropy_grad(&softmax(logits)?, targets)?;
    let entry = probe(None, "softmax_cross_entropy", "logits", &analytic, opts, &mut rng, |i, d| {
        Ok((cross_entropy(targets, &softmax(&shifted(logits, i, d))?)?, 0))
    })?;
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries: vec![entry],
    })
}

/// Runs every layer kind on small random shapes.
pub fn check_layer_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x1a7e5));
    let mut init = |spec: LayerSpec, shape: &[usize]| Layer::<f64>::init(&spec, shape, &mut rng);
    let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
        (init(LayerSpec::conv3x3(3), &[2, 5, 5])?, vec![2, 2, 5, 5]),
        (
            init(LayerSpec::Conv2d { filters: 2, kernel: 2, padding: 0, stride: 2 }, &[3, 6, 6])?,
            vec![2, 3, 6, 6],
        ),
        (init(LayerSpec::Dense { units: 4 }, &[6])?, vec![3, 6]),
        (init(LayerSpec::Relu, &[2, 3, 3])?, vec![2, 2, 3, 3]),
        (init(LayerSpec::MaxPool2d, &[2, 4, 4])?, vec![2, 2, 4, 4]),
        (init(LayerSpec::Dropout { p: 0.4 }, &[12])?, vec![3, 12]),
        (init(LayerSpec::Flatten, &[2, 2, 3])?, vec![2, 2, 2, 3]),
        (init(LayerSpec::Softmax, &[5])?, vec![3, 5]),
    ];
    let all = GradCheckOptions {
        checks_per_tensor: usize::MAX,
        attempts_per_tensor: usize::MAX,
        ..opts.clone()
    };
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        entries: vec![],
    };
    for (layer, shape) in cases {
        let biased = matches!(layer, Layer::Conv2d { .. } | Layer::Dense { .. });
        // Nonzero biases so that the bias gradients are not checked at a
        // special point.
        let mut layer = layer;
        if biased {
            for (name, p) in layer.params_mut() {
                if name == "bias" {
                    p.value_mut().data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
                }
            }
        }
        let x = uniform(&shape, -1.0, 1.0, &mut rng);
        report.merge(check_layer(&layer, &x, &all)?);
    }
    let logits = uniform(&[4, 6], -2.0, 2.0, &mut rng);
    let targets = random_simplex_rows(4, 6, &mut rng);
    report.merge(check_softmax_cross_entropy(&logits, &targets, &all)?);
    Ok(report)
}

/// Checks every parameter gradient of `net` on one batch.
pub fn check_network(net: &mut Network<f64>, x: &Tensor<f64>, targets: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    check_network_with(net, x, targets, opts, |_| {})
}

/// [`check_network`] with a hook that may alter the analytic gradients
/// before comparison; used to confirm that a wrong gradient is caught.
pub fn check_network_with(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    targets: &Tensor<f64>,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut Network<f64>),
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    net.compute_gradients(x, targets, false)?;
    tamper(net);
    let grads: Vec<(usize, &'static str, Tensor<f64>)> =
        net.params().map(|(i, name, p)| (i, name, p.grad().clone())).collect();
    let kinds: Vec<&'static str> = net.layers().iter().map(|l| l.kind()).collect();

    let mut entries = Vec::with_capacity(grads.len());
    for (k, (layer_index, name, grad)) in grads.iter().enumerate() {
        let entry = probe(Some(*layer_index), kinds[*layer_index], name, grad, opts, &mut rng, |i, d| {
            let original = net.params().nth(k).expect("param").2.value().data()[i];
            set_param(net, k, i, original + d);
            let mut h = DefaultHasher::new();
            let probs = net.predict_with_signature(x, &mut h);
            set_param(net, k, i, original);
            Ok((cross_entropy(targets, &probs?)?, h.finish()))
        })?;
        entries.push(entry);
    }
    for layer in net.layers_mut() {
        layer.clear_cache();
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

fn set_param(net: &mut Network<f64>, k: usize, i: usize, v: f64) {
    net.params_mut().nth(k).expect("param").2.value_mut().data_mut()[i] = v;
}

/// Builds `spec` from `opts.seed` and checks it on a batch of `batch`
/// uniform random inputs with random soft targets.
pub fn check_spec(spec: &NetworkSpec, batch: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut net = Network::<f64>::build(spec, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0xba7c4));
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let x = uniform(&shape, 0.0, 1.0, &mut rng);
    let t = random_simplex_rows(batch, spec.classes, &mut rng);
    check_network(&mut net, &x, &t, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn layer_suite_passes() {
        let report = check_layer_suite(&GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        let kinds: Vec<String> = report.per_layer_max().into_iter().map(|(k, _)| k).collect();
        for k in ["conv2d", "dense", "relu", "maxpool2d", "dropout", "flatten", "softmax", "softmax_cross_entropy"] {
            assert!(kinds.iter().any(|x| x == k), "missing {k}");
        }
    }

    #[test]
    fn tampered_gradient_is_caught_and_named() {
        let spec = NetworkSpec {
            input_shape: vec![1, 4, 4],
            classes: 3,
            layers: vec![
                LayerSpec::conv3x3(2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
        };
        let mut net = Network::<f64>::build(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let t = random_simplex_rows(2, 3, &mut rng);
        let opts = GradCheckOptions::default();
        assert!(check_network(&mut net, &x, &t, &opts).unwrap().passed());

        let report = check_network_with(&mut net, &x, &t, &opts, |n| {
            let (_, _, p) = n.params_mut().nth(2).unwrap();
            p.grad_mut().data_mut().iter_mut().for_each(|g| *g *= 1.01);
        })
        .unwrap();
        assert!(!report.passed());
        let failed: Vec<String> = report.failures().map(|e| e.name()).collect();
        assert_eq!(failed, vec!["layer 3 (dense) weight"]);
    }
}

//! Baseline and negotiated training loops.
//!
//! Each epoch:
//!
//! 1. reseed dropout and shuffle the training set from `seed + epoch`;
//! 2. run minibatch SGD against the current training targets (the one-hot
//!    originals for a baseline run, the negotiated labels otherwise);
//! 3. evaluate train and test splits in inference mode;
//! 4. if negotiating and the schedule is active, blend the train-split
//!    predictions from step 3 into the negotiated labels.
//!
//! Accuracy always compares argmax predictions against the original hard
//! labels, and validation loss is always taken against the original one-hot
//! test labels.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::negotiation::{LabelMatrix, LabelStore, NegotiationConfig, NegotiationSchedule};
use crate::nn::{cross_entropy, Network, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

// Stream reserved for the per-epoch shuffle (0 is init, 1 is dropout).
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    pub seed: u64,
    /// `None` trains the baseline against fixed one-hot labels.
    #[serde(default)]
    pub negotiation: Option<NegotiationConfig>,
    /// Batch size of the inference-mode evaluation passes.
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_eval_batch() -> usize {
    256
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, negotiation: Option<NegotiationConfig>) -> Self {
        TrainConfig {
            epochs,
            sgd: SgdConfig::default(),
            seed,
            negotiation,
            eval_batch_size: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("eval batch size must be positive".into()));
        }
        self.sgd.validate()?;
        if let Some(n) = &self.negotiation {
            n.validate()?;
        }
        Ok(())
    }
}

/// One epoch of metrics. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Train-split cross-entropy against the targets trained on this epoch.
    pub train_loss_negotiated: f64,
    /// Train-split cross-entropy against the original one-hot labels.
    pub train_loss_original: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate of this epoch's negotiation phase, the frozen rate once the
    /// schedule is inactive, or 0 for a baseline run.
    pub negotiation_rate: f64,
    /// Mean L1 distance of negotiated from original labels at epoch end.
    pub label_drift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss of `probs` against `targets` and accuracy against `classes`.
pub fn score<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, classes: &[usize]) -> Result<Evaluation> {
    let loss = cross_entropy(targets, probs)?.as_f64();
    let hits = tensor::argmax(probs, 1)?
        .iter()
        .zip(classes)
        .filter(|(p, c)| p == c)
        .count();
    Ok(Evaluation {
        loss,
        accuracy: hits as f64 / classes.len() as f64,
    })
}

/// Inference-mode loss and accuracy against the original labels.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, batch_size: usize) -> Result<Evaluation> {
    let probs = net.predict_batched(ds.inputs(), batch_size)?;
    score(&probs, ds.labels().as_tensor(), ds.class_indices())
}

/// Passed to the observer after every epoch.
pub struct EpochReport<'a, T> {
    pub record: &'a MetricsRecord,
    pub store: &'a LabelStore<T>,
    /// Whether a negotiation phase ran at the end of this epoch.
    pub negotiated: bool,
}

pub struct TrainOutcome<T> {
    pub records: Vec<MetricsRecord>,
    pub network: Network<T>,
    pub store: LabelStore<T>,
    pub schedule: Option<NegotiationSchedule>,
}

impl<T> TrainOutcome<T> {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }

    /// Epoch record with the lowest validation loss (earliest on ties).
    pub fn best_record(&self) -> &MetricsRecord {
        self.records
            .iter()
            .reduce(|best, r| if r.val_loss < best.val_loss { r } else { best })
            .expect("at least one epoch")
    }
}

pub fn train<T: Scalar>(
    net: Network<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(net, train_set, test_set, cfg, |_| Ok(()))
}

/// [`train`] with a callback after every epoch, e.g. for progress output or
/// exporting negotiated labels.
pub fn train_with<T: Scalar>(
    mut net: Network<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochReport<'_, T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.classes() != net.classes() || test_set.classes() != net.classes() {
        return Err(Error::InvalidArgument(format!(
            "network has {} classes, datasets have {} and {}",
            net.classes(),
            train_set.classes(),
            test_set.classes()
        )));
    }
    let anchor = cfg.negotiation.as_ref().map(|n| n.anchor).unwrap_or_default();
    let mut store = LabelStore::new(train_set.labels().clone(), anchor);
    let mut schedule = cfg
        .negotiation
        .clone()
        .map(NegotiationSchedule::new)
        .transpose()?;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Divergence {
                epoch,
                detail: format!("non-finite {op}"),
            },
            other => other,
        };
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        net.reseed_dropout(epoch_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(SHUFFLE_STREAM);
        order.shuffle(&mut rng);

        let targets = match schedule {
            Some(_) => store.negotiated(),
            None => store.original(),
        };
        for batch in order.chunks(cfg.sgd.batch_size) {
            let x = train_set.inputs().select_rows(batch)?;
            let t = targets.select_rows(batch)?;
            let loss = net.backward_and_step(&x, &t, &cfg.sgd).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite training loss".into(),
                });
            }
        }

        let train_probs = net
            .predict_batched(train_set.inputs(), cfg.eval_batch_size)
            .map_err(diverged)?;
        let on_targets = score(&train_probs, targets.as_tensor(), train_set.class_indices())?;
        let on_original = score(&train_probs, store.original().as_tensor(), train_set.class_indices())?;
        let val = evaluate(&net, test_set, cfg.eval_batch_size).map_err(diverged)?;
        for (what, v) in [("train loss", on_targets.loss), ("validation loss", val.loss)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite {what}"),
                });
            }
        }

        let mut negotiated = false;
        let mut rate = 0.0;
        if let Some(sched) = schedule.as_mut() {
            rate = sched.rate();
            if sched.is_active() {
                let preds = LabelMatrix::new(train_probs)?;
                rate = store.negotiate_with(&preds, sched)?;
                negotiated = true;
            }
        }

        let record = MetricsRecord {
            epoch,
            train_loss_negotiated: on_targets.loss,
            train_loss_original: on_original.loss,
            train_acc: on_original.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            negotiation_rate: rate,
            label_drift: store.label_drift(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}, rate {:.2}",
            record.train_loss_original,
            record.train_acc,
            record.val_loss,
            record.val_acc,
            record.negotiation_rate
        );
        observer(&EpochReport {
            record: &record,
            store: &store,
            negotiated,
        })?;
        records.push(record);
    }

    Ok(TrainOutcome {
        records,
        network: net,
        store,
        schedule,
    })
}

pub fn write_metrics_csv(w: impl Write, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(std::io::BufWriter::new(file), records)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::negotiation::AnchorMode;
    use crate::nn::{LayerSpec, NetworkSpec};
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![1, 4, 4],
            classes: 3,
            layers: vec![
                LayerSpec::conv3x3(4),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Dropout { p: 0.25 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
        }
    }

    /// Noisy class-dependent 4x4 patterns with a share of flipped labels,
    /// small enough to overfit in a few epochs.
    fn synthetic(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 3;
            for p in 0..16 {
                let on = p % 3 == class;
                let base = if on { 0.7 } else { 0.2 };
                data.push((base + rng.gen_range(-0.2..0.2f64)).clamp(0.0, 1.0));
            }
            labels.push(if rng.gen_bool(0.2) { (class + 1) % 3 } else { class });
        }
        Dataset::new("synthetic", Tensor::new(&[n, 1, 4, 4], data).unwrap(), labels, 3).unwrap()
    }

    fn cfg(negotiation: Option<NegotiationConfig>) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig { batch_size: 8, ..SgdConfig::default() },
            ..TrainConfig::new(6, 11, negotiation)
        }
    }

    fn run(c: &TrainConfig) -> TrainOutcome<f64> {
        let net = Network::build(&tiny_spec(), c.seed).unwrap();
        train(net, &synthetic(48, 1), &synthetic(30, 2), c).unwrap()
    }

    #[test]
    fn uniform_output_scores_ln_k() {
        let mut net = Network::<f64>::build(&tiny_spec(), 0).unwrap();
        let dense = net.layers().len() - 2;
        for (layer, _, p) in net.params_mut() {
            if layer == dense {
                p.value_mut().data_mut().fill(0.0);
            }
        }
        let ds = synthetic(12, 3);
        let e = evaluate(&net, &ds, 5).unwrap();
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);

        let probs = Tensor::full(&[4, 10], 0.1);
        let y = LabelMatrix::<f64>::one_hot(&[0, 3, 9, 2], 10).unwrap();
        let e = score(&probs, y.as_tensor(), &[0, 3, 9, 2]).unwrap();
        assert!((e.loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictor() {
        let classes = [1, 0, 2, 2];
        let y = LabelMatrix::<f64>::one_hot(&classes, 3).unwrap();
        let e = score(y.as_tensor(), y.as_tensor(), &classes).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(e.loss.abs() < 1e-12);
    }

    #[test]
    fn random_predictor_accuracy_within_three_sigma() {
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probs = Tensor::from_fn(&[n, 10], |_| rng.gen_range(0.0..1.0f64)).unwrap();
        let sums: Vec<f64> = probs.data().chunks(10).map(|r| r.iter().sum()).collect();
        let probs = Tensor::from_fn(&[n, 10], |i| probs.data()[i] / sums[i / 10]).unwrap();
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let y = LabelMatrix::<f64>::one_hot(&classes, 10).unwrap();
        let acc = score(&probs, y.as_tensor(), &classes).unwrap().accuracy;
        let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
        assert!((acc - 0.1).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let c = cfg(Some(NegotiationConfig::default()));
        let (a, b) = (run(&c), run(&c));
        assert_eq!(a.records, b.records);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn degenerate_schedule_matches_baseline() {
        let base = run(&cfg(None));
        let degenerate = NegotiationConfig {
            initial_rate: 0.0,
            increment: 2.0,
            max_rate: 0.95,
            anchor: AnchorMode::Previous,
        };
        let neg = run(&cfg(Some(degenerate)));
        assert_eq!(base.records, neg.records);
        assert_eq!(neg.store.negotiated(), neg.store.original());
        assert_eq!(neg.schedule.unwrap().phases_completed(), 1);
    }

    #[test]
    fn negotiated_run_changes_targets_but_not_originals() {
        let c = cfg(Some(NegotiationConfig::default()));
        let out = run(&c);
        let originals = synthetic(48, 1);
        assert_eq!(out.store.original(), originals.labels());
        assert!(out.store.label_drift() > 0.0);
        let rates: Vec<f64> = out.records.iter().map(|r| r.negotiation_rate).collect();
        for (i, r) in rates.iter().enumerate() {
            assert!((r - 0.05 * (i + 1) as f64).abs() < 1e-12);
        }
        for r in &out.records {
            assert!(r.train_loss_negotiated.is_finite() && r.train_loss_negotiated >= 0.0);
            assert!((0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.val_acc));
        }
        // The first epoch trains on the untouched originals.
        assert_eq!(out.records[0].train_loss_negotiated, out.records[0].train_loss_original);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let out = run(&cfg(None));
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "epoch,train_loss_negotiated,train_loss_original,train_acc,val_loss,val_acc,negotiation_rate,label_drift\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_metrics_csv(&path, &out.records).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), out.records);
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut c = cfg(None);
        c.sgd.learning_rate = 1e200;
        let err = train(
            Network::build(&tiny_spec(), 0).unwrap(),
            &synthetic(48, 1),
            &synthetic(30, 2),
            &c,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn sgd_step_descends_for_small_learning_rate() {
        let ds = synthetic(12, 5);
        for seed in 0..20 {
            let mut net = Network::<f64>::build(&tiny_spec(), seed).unwrap();
            let sgd = SgdConfig { learning_rate: 1e-3, momentum: 0.0, batch_size: 12 };
            let before = cross_entropy(ds.labels().as_tensor(), &net.predict(ds.inputs()).unwrap()).unwrap();
            net.compute_gradients(ds.inputs(), ds.labels().as_tensor(), false).unwrap();
            net.apply_sgd(&sgd);
            let after = cross_entropy(ds.labels().as_tensor(), &net.predict(ds.inputs()).unwrap()).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }
}

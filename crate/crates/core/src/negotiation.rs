//! Negotiated labels.
//!
//! Training targets start as the one-hot ground truth. At the end of each
//! negotiation phase (one epoch) the model's inference-mode predictions on the
//! training set are blended into the stored targets,
//!
//! ```text
//! negotiated <- (1 - n) * anchor + n * predictions
//! ```
//!
//! and the negotiation rate `n` then rises by a fixed increment. Once the next
//! rate would exceed `max_rate` the schedule freezes and the targets stop
//! changing. With [`AnchorMode::Previous`] the anchor is the previous phase's
//! negotiated labels (cumulative blending); with [`AnchorMode::Originals`] it
//! is always the pristine one-hot labels.
//!
//! The loss is then ordinary soft-target cross-entropy between the current
//! negotiated labels and the model output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::check_simplex_rows;
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance used when comparing rates against `max_rate`, so that
/// accumulated decimal increments like `0.05 + 18 * 0.05` still count as 0.95.
pub const RATE_EPS: f64 = 1e-9;

/// A `[samples x classes]` matrix whose rows are probability distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix<T>(Tensor<T>);

impl<T: Scalar> LabelMatrix<T> {
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        check_simplex_rows(&rows)?;
        Ok(LabelMatrix(rows))
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("no labels".into()));
        }
        let mut data = vec![T::zero(); labels.len() * classes];
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {c} at row {i} out of range for {classes} classes"
                )));
            }
            data[i * classes + c] = T::one();
        }
        Ok(LabelMatrix(Tensor::new(&[labels.len(), classes], data)?))
    }

    pub fn uniform(rows: usize, classes: usize) -> Self {
        LabelMatrix(Tensor::full(&[rows, classes], T::one() / T::lit(classes as f64)))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Rows gathered in order, e.g. the targets of one minibatch.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        self.0.select_rows(indices)
    }

    /// Row-wise argmax (ties to the lowest class index).
    pub fn argmax(&self) -> Vec<usize> {
        crate::tensor::argmax(&self.0, 1).expect("rank-2 matrix")
    }

    /// Writes `sample,class_0,..,class_{K-1}` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["sample".to_string()];
        header.extend((0..self.classes()).map(|k| format!("class_{k}")));
        out.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.as_f64().to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Convex combination `current + n * (predictions - current)`, row by row.
///
/// `n = 0` returns `current` and `n = 1` returns `predictions` bit for bit.
pub fn blend<T: Scalar>(
    current: &LabelMatrix<T>,
    predictions: &LabelMatrix<T>,
    n: f64,
) -> Result<LabelMatrix<T>> {
    if current.0.shape() != predictions.0.shape() {
        return Err(Error::mismatch(
            "blend",
            current.0.shape(),
            predictions.0.shape(),
        ));
    }
    if !(0.0..=1.0).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "negotiation rate {n} outside [0, 1]"
        )));
    }
    if n == 0.0 {
        return Ok(current.clone());
    }
    if n == 1.0 {
        return Ok(predictions.clone());
    }
    let rate = T::lit(n);
    let data = current
        .0
        .data()
        .iter()
        .zip(predictions.0.data())
        .map(|(&a, &b)| a + rate * (b - a))
        .collect();
    Ok(LabelMatrix(Tensor::new(current.0.shape(), data)?))
}

/// What a blend is anchored to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Blend into the pristine one-hot labels every phase.
    Originals,
    /// Blend into the previous phase's negotiated labels.
    #[default]
    Previous,
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "originals" => Ok(AnchorMode::Originals),
            "previous" => Ok(AnchorMode::Previous),
            other => Err(Error::InvalidArgument(format!(
                "unknown anchor mode {other:?} (expected originals|previous)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegotiationConfig {
    pub initial_rate: f64,
    pub increment: f64,
    pub max_rate: f64,
    #[serde(default)]
    pub anchor: AnchorMode,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        NegotiationConfig {
            initial_rate: 0.05,
            increment: 0.05,
            max_rate: 0.95,
            anchor: AnchorMode::Previous,
        }
    }
}

impl NegotiationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.initial_rate) {
            return Err(Error::InvalidArgument(format!(
                "initial negotiation rate {} outside [0, 1)",
                self.initial_rate
            )));
        }
        if !(self.increment > 0.0 && self.increment.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "negotiation increment {} must be positive",
                self.increment
            )));
        }
        if !(self.max_rate > 0.0 && self.max_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max negotiation rate {} outside (0, 1]",
                self.max_rate
            )));
        }
        Ok(())
    }
}

/// Linearly rising negotiation rate.
///
/// While active, `rate = initial_rate + phase * increment`. When the next rate
/// would exceed `max_rate` the schedule deactivates and the rate stays at the
/// last value used.
#[derive(Clone, Debug, PartialEq)]
pub struct NegotiationSchedule {
    config: NegotiationConfig,
    phase: usize,
    completed: usize,
    active: bool,
}

impl NegotiationSchedule {
    pub fn new(config: NegotiationConfig) -> Result<Self> {
        config.validate()?;
        let active = config.initial_rate <= config.max_rate + RATE_EPS;
        Ok(NegotiationSchedule {
            config,
            phase: 0,
            completed: 0,
            active,
        })
    }

    pub fn config(&self) -> &NegotiationConfig {
        &self.config
    }

    pub fn rate(&self) -> f64 {
        self.config.initial_rate + self.phase as f64 * self.config.increment
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Number of negotiation phases run so far.
    pub fn phases_completed(&self) -> usize {
        self.completed
    }

    /// Marks the current phase done and moves to the next rate, or freezes.
    fn advance(&mut self) {
        self.completed += 1;
        let next = self.config.initial_rate + (self.phase + 1) as f64 * self.config.increment;
        if next > self.config.max_rate + RATE_EPS {
            self.active = false;
        } else {
            self.phase += 1;
        }
    }
}

/// Original one-hot labels plus the evolving negotiated training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelStore<T> {
    original: LabelMatrix<T>,
    negotiated: LabelMatrix<T>,
    anchor: AnchorMode,
}

impl<T: Scalar> LabelStore<T> {
    pub fn new(original: LabelMatrix<T>, anchor: AnchorMode) -> Self {
        LabelStore {
            negotiated: original.clone(),
            original,
            anchor,
        }
    }

    pub fn original(&self) -> &LabelMatrix<T> {
        &self.original
    }

    pub fn negotiated(&self) -> &LabelMatrix<T> {
        &self.negotiated
    }

    pub fn anchor(&self) -> AnchorMode {
        self.anchor
    }

    /// Blends `predictions` into the negotiated labels at the schedule's
    /// current rate, then advances the schedule. Returns the rate used.
    pub fn negotiate_with(
        &mut self,
        predictions: &LabelMatrix<T>,
        schedule: &mut NegotiationSchedule,
    ) -> Result<f64> {
        if !schedule.is_active() {
            return Err(Error::ScheduleInactive);
        }
        let rate = schedule.rate();
        let anchor = match self.anchor {
            AnchorMode::Originals => &self.original,
            AnchorMode::Previous => &self.negotiated,
        };
        self.negotiated = blend(anchor, predictions, rate)?;
        schedule.advance();
        Ok(rate)
    }

    /// Mean L1 distance between negotiated and original rows.
    pub fn label_drift(&self) -> f64 {
        let k = self.original.classes();
        let total: f64 = self
            .original
            .0
            .data()
            .chunks_exact(k)
            .zip(self.negotiated.0.data().chunks_exact(k))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (x - y).abs().as_f64())
                    .sum::<f64>()
            })
            .sum();
        total / self.original.rows() as f64
    }
}

/// One negotiation phase: a fresh inference-mode pass over all training
/// inputs, a blend into the store, and a schedule advance.
pub fn negotiate_phase<T: Scalar>(
    store: &mut LabelStore<T>,
    net: &Network<T>,
    train_inputs: &Tensor<T>,
    schedule: &mut NegotiationSchedule,
    batch_size: usize,
) -> Result<f64> {
    if !schedule.is_active() {
        return Err(Error::ScheduleInactive);
    }
    let predictions = LabelMatrix::new(net.predict_batched(train_inputs, batch_size)?)?;
    store.negotiate_with(&predictions, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, data: &[f64]) -> LabelMatrix<f64> {
        LabelMatrix::new(Tensor::new(&[rows, data.len() / rows], data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let y = m(2, &[1.0, 0.0, 0.0, 1.0]);
        let p = m(2, &[0.3, 0.7, 0.9, 0.1]);
        assert_eq!(blend(&y, &p, 0.0).unwrap(), y);
        assert_eq!(blend(&y, &p, 1.0).unwrap(), p);
    }

    #[test]
    fn blend_hand_value() {
        let out = blend(&m(1, &[1.0, 0.0]), &m(1, &[0.6, 0.4]), 0.5).unwrap();
        assert!((out.row(0)[0] - 0.8).abs() < 1e-15);
        assert!((out.row(0)[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn blend_rejects_bad_arguments() {
        let a = m(1, &[1.0, 0.0]);
        assert!(blend(&a, &m(1, &[0.2, 0.3, 0.5]), 0.5).is_err());
        assert!(blend(&a, &a, -0.1).is_err());
        assert!(blend(&a, &a, 1.1).is_err());
    }

    #[test]
    fn label_matrix_requires_simplex_rows() {
        assert!(LabelMatrix::new(Tensor::new(&[1, 2], vec![0.6, 0.6]).unwrap()).is_err());
        assert!(LabelMatrix::<f64>::one_hot(&[0, 3], 3).is_err());
        let oh = LabelMatrix::<f64>::one_hot(&[2, 0], 3).unwrap();
        assert_eq!(oh.as_tensor().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(oh.argmax(), vec![2, 0]);
    }

    #[test]
    fn default_schedule_runs_nineteen_phases() {
        let mut sched = NegotiationSchedule::new(NegotiationConfig::default()).unwrap();
        let mut store = LabelStore::new(LabelMatrix::<f64>::one_hot(&[0, 1], 2).unwrap(), AnchorMode::Previous);
        let preds = m(2, &[0.5, 0.5, 0.5, 0.5]);
        let mut rates = vec![];
        while sched.is_active() {
            rates.push(store.negotiate_with(&preds, &mut sched).unwrap());
        }
        assert_eq!(rates.len(), 19);
        assert_eq!(sched.phases_completed(), 19);
        assert!((rates[0] - 0.05).abs() < 1e-12);
        assert!((rates[18] - 0.95).abs() < 1e-12);
        for w in rates.windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
        let frozen = sched.rate();
        assert!((frozen - 0.95).abs() < 1e-12);
        assert!(matches!(
            store.negotiate_with(&preds, &mut sched),
            Err(Error::ScheduleInactive)
        ));
        assert_eq!(sched.rate(), frozen);
    }

    #[test]
    fn confident_correct_model_is_a_fixed_point() {
        let y = LabelMatrix::<f64>::one_hot(&[0, 2, 1], 3).unwrap();
        let mut store = LabelStore::new(y.clone(), AnchorMode::Previous);
        let mut sched = NegotiationSchedule::new(NegotiationConfig::default()).unwrap();
        while sched.is_active() {
            store.negotiate_with(&y, &mut sched).unwrap();
        }
        assert_eq!(store.negotiated(), &y);
        assert_eq!(store.label_drift(), 0.0);
    }

    #[test]
    fn drift_toward_uniform_at_full_rate() {
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let y = LabelMatrix::<f64>::one_hot(&labels, 10).unwrap();
        let mut store = LabelStore::new(y, AnchorMode::Originals);
        assert_eq!(store.label_drift(), 0.0);
        let cfg = NegotiationConfig {
            initial_rate: 0.5,
            increment: 0.5,
            max_rate: 1.0,
            anchor: AnchorMode::Originals,
        };
        let mut sched = NegotiationSchedule::new(cfg).unwrap();
        let uniform = LabelMatrix::uniform(20, 10);
        store.negotiate_with(&uniform, &mut sched).unwrap();
        assert!((store.label_drift() - 0.9).abs() < 1e-12);
        assert_eq!(sched.rate(), 1.0);
        store.negotiate_with(&uniform, &mut sched).unwrap();
        assert!((store.label_drift() - 2.0 * (1.0 - 1.0 / 10.0)).abs() < 1e-12);
        assert!(!sched.is_active());
    }

    #[test]
    fn anchor_modes_differ_after_two_phases() {
        let y = LabelMatrix::<f64>::one_hot(&[0], 2).unwrap();
        let p = m(1, &[0.0, 1.0]);
        let cfg = NegotiationConfig {
            initial_rate: 0.5,
            increment: 0.1,
            max_rate: 0.95,
            anchor: AnchorMode::Previous,
        };
        let mut prev = LabelStore::new(y.clone(), AnchorMode::Previous);
        let mut orig = LabelStore::new(y, AnchorMode::Originals);
        let (mut s1, mut s2) = (
            NegotiationSchedule::new(cfg.clone()).unwrap(),
            NegotiationSchedule::new(cfg).unwrap(),
        );
        for _ in 0..2 {
            prev.negotiate_with(&p, &mut s1).unwrap();
            orig.negotiate_with(&p, &mut s2).unwrap();
        }
        // previous: 1 -> 0.5 -> 0.5 * 0.4 = 0.2; originals: 1 * 0.4 = 0.4
        assert!((prev.negotiated().row(0)[0] - 0.2).abs() < 1e-12);
        assert!((orig.negotiated().row(0)[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn schedule_config_validation() {
        let bad = [
            NegotiationConfig { initial_rate: 1.0, ..Default::default() },
            NegotiationConfig { initial_rate: -0.1, ..Default::default() },
            NegotiationConfig { increment: 0.0, ..Default::default() },
            NegotiationConfig { max_rate: 1.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(NegotiationSchedule::new(cfg).is_err());
        }
        let late_start = NegotiationConfig { initial_rate: 0.5, max_rate: 0.3, ..Default::default() };
        assert!(!NegotiationSchedule::new(late_start).unwrap().is_active());
    }

    #[test]
    fn csv_export_layout() {
        let y = m(2, &[0.25, 0.75, 1.0, 0.0]);
        let mut buf = Vec::new();
        y.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample,class_0,class_1\n0,0.25,0.75\n1,1,0\n"
        );
    }
}

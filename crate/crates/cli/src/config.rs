//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "dataset": "mnist",
//!   "preset": "mnist",
//!   "subset": { "train": 256, "test": 256, "seed": 0, "stratified": true },
//!   "train": {
//!     "epochs": 50,
//!     "sgd": { "learning_rate": 0.01, "momentum": 0.9, "batch_size": 32 },
//!     "seed": 0,
//!     "negotiation": { "initial_rate": 0.05, "increment": 0.05, "max_rate": 0.95, "anchor": "previous" },
//!     "eval_batch_size": 256
//!   },
//!   "export_labels": false
//! }
//! ```
//!
//! `"negotiation": null` selects the baseline. `preset` defaults to the
//! dataset's usual architecture.

use std::path::{Path, PathBuf};

use negotiated::data::{DatasetKind, SubsetSpec};
use negotiated::negotiation::NegotiationConfig;
use negotiated::nn::{NetworkSpec, Preset};
use negotiated::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub subset: SubsetSpec,
    pub train: TrainConfig,
    /// Write the negotiated labels after every negotiation phase.
    #[serde(default)]
    pub export_labels: bool,
    /// Where artifacts go. Not part of the snapshot written next to them,
    /// so a snapshot replays identically into any directory.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The default regime for `dataset`: stratified subset sizes, epochs and
    /// a negotiated run with the default schedule.
    pub fn regime(dataset: DatasetKind, seed: u64) -> Self {
        let (train, test, epochs) = match dataset {
            DatasetKind::Mnist => (256, 256, 50),
            DatasetKind::FashionMnist => (128, 128, 50),
            DatasetKind::Cifar10 => (1000, 1000, 60),
            DatasetKind::Cifar100 => (5000, 1000, 20),
        };
        ExperimentConfig {
            dataset,
            preset: None,
            subset: SubsetSpec {
                train,
                test,
                seed,
                stratified: true,
            },
            train: TrainConfig::new(epochs, seed, Some(NegotiationConfig::default())),
            export_labels: false,
            output_dir: None,
        }
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or_else(|| self.dataset.preset())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        self.preset().spec()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.network_spec();
        let sample_shape = match self.dataset {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => [3, 32, 32],
        };
        if spec.input_shape != sample_shape {
            return Err(CliError::Usage(format!(
                "preset {} expects {:?} inputs but {} samples are {sample_shape:?}",
                self.preset().name(),
                spec.input_shape,
                self.dataset
            )));
        }
        if spec.classes != self.dataset.classes() {
            return Err(CliError::Usage(format!(
                "preset {} has {} classes but {} has {}",
                self.preset().name(),
                spec.classes,
                self.dataset,
                self.dataset.classes()
            )));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Same experiment with negotiation switched off.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.train.negotiation = None;
        cfg
    }

    /// Same experiment with `seed` for both the subset draw and training.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.subset.seed = seed;
        cfg.train.seed = seed;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_drops_output_dir() {
        let mut cfg = ExperimentConfig::regime(DatasetKind::FashionMnist, 3);
        cfg.output_dir = Some("somewhere".into());
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back.output_dir, None);
        cfg.output_dir = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset":"mnist","subset":{"train":20,"test":10,"seed":1},
                "train":{"epochs":2,"seed":1,"negotiation":null}}"#,
        )
        .unwrap();
        assert!(cfg.subset.stratified);
        assert_eq!(cfg.train.sgd.batch_size, 32);
        assert_eq!(cfg.preset(), Preset::Mnist);
        cfg.validate().unwrap();
    }

    #[test]
    fn mismatched_preset_is_a_usage_error() {
        let mut cfg = ExperimentConfig::regime(DatasetKind::Mnist, 0);
        cfg.preset = Some(Preset::Cifar10);
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        cfg.dataset = DatasetKind::Cifar100;
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
    }
}

//! Single runs, seed sweeps, dataset verification and gradient checks.
//!
//! A run directory holds:
//!
//! | file               | contents                                              |
//! |--------------------|-------------------------------------------------------|
//! | `config.json`      | the experiment config; replaying it reproduces the run |
//! | `metrics.csv`      | one row per epoch                                     |
//! | `checkpoint.bin`   | final parameters and momentum buffers                 |
//! | `subset_train.csv` | `position,source_index,label` of the training subset  |
//! | `subset_test.csv`  | the same for the test subset                          |
//! | `labels/phase_NN.csv` | negotiated labels after phase NN (`export_labels`) |

use std::fs;
use std::path::{Path, PathBuf};

use negotiated::data::{write_indices_csv, DatasetKind, FileStatus, Manifest, RawDataset, Subset};
use negotiated::gradcheck::{check_layer_suite, check_spec, GradCheckOptions, GradCheckReport};
use negotiated::nn::Preset;
use negotiated::trainer::{save_metrics_csv, train_with, MetricsRecord, TrainOutcome};
use negotiated::{Dataset, Network};

use crate::{CliError, ExperimentConfig};

/// Full train and test splits of a dataset, as loaded from disk.
pub struct SourceData {
    pub kind: DatasetKind,
    pub train: RawDataset,
    pub test: RawDataset,
}

impl SourceData {
    pub fn load(kind: DatasetKind, root: &Path) -> Result<Self, CliError> {
        let missing = kind.missing_files(root);
        if !missing.is_empty() {
            return Err(CliError::MissingData(missing));
        }
        let (train, test) = kind.load(root)?;
        Ok(SourceData { kind, train, test })
    }
}

/// The normalized subsets of one experiment.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub subset: Subset,
}

pub fn prepare(cfg: &ExperimentConfig, source: &SourceData) -> Result<Prepared, CliError> {
    if source.kind != cfg.dataset {
        return Err(CliError::Usage(format!(
            "config is for {} but {} was loaded",
            cfg.dataset, source.kind
        )));
    }
    let subset = cfg
        .subset
        .apply(&source.train, &source.test)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Prepared {
        train: subset.train.to_dataset()?,
        test: subset.test.to_dataset()?,
        subset,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn save_indices(path: &Path, indices: &[usize], labels: &[usize]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_indices_csv(std::io::BufWriter::new(file), indices, labels)?;
    Ok(())
}

/// Trains one configuration. With `out` set, every artifact of the run is
/// written there.
pub fn run(cfg: &ExperimentConfig, source: &SourceData, out: Option<&Path>) -> Result<TrainOutcome<f64>, CliError> {
    cfg.validate()?;
    let data = prepare(cfg, source)?;
    let net = Network::build(&cfg.network_spec(), cfg.train.seed)?;
    let labels_dir = out.filter(|_| cfg.export_labels).map(|d| d.join("labels"));
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("config.json"), &cfg.to_json())?;
        save_indices(&dir.join("subset_train.csv"), &data.subset.train_indices, data.subset.train.labels())?;
        save_indices(&dir.join("subset_test.csv"), &data.subset.test_indices, data.subset.test.labels())?;
    }
    if let Some(dir) = &labels_dir {
        create_dir(dir)?;
    }
    let mut phase = 0;
    let outcome = train_with(net, &data.train, &data.test, &cfg.train, |report| {
        if let (Some(dir), true) = (&labels_dir, report.negotiated) {
            phase += 1;
            report.store.negotiated().save_csv(&dir.join(format!("phase_{phase:02}.csv")))?;
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        save_metrics_csv(&dir.join("metrics.csv"), &outcome.records)?;
        outcome.network.save_checkpoint(&dir.join("checkpoint.bin"))?;
    }
    Ok(outcome)
}

/// Final and best-epoch figures of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub final_acc: f64,
    pub final_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub max_val_loss: f64,
    pub records: Vec<MetricsRecord>,
}

impl ArmSummary {
    pub fn from_records(records: Vec<MetricsRecord>) -> Self {
        let last = records.last().expect("at least one epoch");
        let best = records
            .iter()
            .reduce(|b, r| if r.val_loss < b.val_loss { r } else { b })
            .expect("at least one epoch");
        ArmSummary {
            final_acc: last.val_acc,
            final_loss: last.val_loss,
            best_val_loss: best.val_loss,
            best_epoch: best.epoch,
            max_val_loss: records.iter().map(|r| r.val_loss).fold(f64::MIN, f64::max),
            records,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: ArmSummary,
    pub negotiated: ArmSummary,
}

/// Runs the baseline and negotiated arms of `cfg` for every seed. Both arms
/// of a seed share the subset draw and the initial parameters. With `out`
/// set, each arm's artifacts go to `out/seed_S/{baseline,negotiated}`.
pub fn compare(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    source: &SourceData,
    out: Option<&Path>,
) -> Result<Vec<SeedResult>, CliError> {
    if cfg.train.negotiation.is_none() {
        return Err(CliError::Usage("compare needs a negotiation schedule".into()));
    }
    if seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let negotiated = cfg.with_seed(seed);
        let baseline = negotiated.baseline();
        let dir = |arm: &str| out.map(|d| d.join(format!("seed_{seed}")).join(arm));
        log::info!("seed {seed}: baseline arm");
        let b = run(&baseline, source, dir("baseline").as_deref())?;
        log::info!("seed {seed}: negotiated arm");
        let n = run(&negotiated, source, dir("negotiated").as_deref())?;
        results.push(SeedResult {
            seed,
            baseline: ArmSummary::from_records(b.records),
            negotiated: ArmSummary::from_records(n.records),
        });
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("config.json"), &cfg.to_json())?;
        write(&dir.join("report.md"), &crate::report::markdown(cfg, &results))?;
        write(&dir.join("report.csv"), &crate::report::csv(&results)?)?;
    }
    Ok(results)
}

/// Checks dataset files against a manifest. Missing files take precedence
/// over digest mismatches.
pub fn verify_data(manifest: &Path, root: &Path) -> Result<Vec<(PathBuf, FileStatus)>, CliError> {
    if !manifest.is_file() {
        return Err(CliError::MissingData(vec![manifest.to_path_buf()]));
    }
    let statuses = Manifest::load(manifest)?.verify(root)?;
    let pick = |want: fn(&FileStatus) -> bool| -> Vec<PathBuf> {
        statuses.iter().filter(|(_, s)| want(s)).map(|(p, _)| p.clone()).collect()
    };
    let missing = pick(|s| *s == FileStatus::Missing);
    if !missing.is_empty() {
        return Err(CliError::MissingData(missing));
    }
    let mismatched = pick(|s| matches!(s, FileStatus::Mismatch { .. }));
    if !mismatched.is_empty() {
        return Err(CliError::DigestMismatch(mismatched));
    }
    Ok(statuses)
}

/// Layer-level checks plus a whole-network check of `preset` on a random
/// batch.
pub fn gradcheck(preset: Preset, seed: u64, batch: usize) -> Result<GradCheckReport, CliError> {
    let opts = GradCheckOptions { seed, ..Default::default() };
    let mut report = check_layer_suite(&opts)?;
    report.merge(check_spec(&preset.spec(), batch, &opts)?);
    Ok(report)
}

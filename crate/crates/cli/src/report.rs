//! Comparison reports: per-seed rows, medians, and the published reference
//! figures for context.

use std::fmt::Write as _;

use negotiated::data::DatasetKind;
use serde::Serialize;

use crate::experiment::{ArmSummary, SeedResult};
use crate::ExperimentConfig;

/// Final test accuracy and loss reported by the original authors of the
/// negotiation method. Shown next to measured values; never used as
/// expected test values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Published {
    pub baseline_acc: f64,
    pub negotiated_acc: f64,
    pub baseline_loss: f64,
    pub negotiated_loss: f64,
}

pub fn published(dataset: DatasetKind) -> Published {
    let (baseline_acc, negotiated_acc, baseline_loss, negotiated_loss) = match dataset {
        DatasetKind::Mnist => (0.828, 0.867, 0.92, 0.41),
        DatasetKind::FashionMnist => (0.719, 0.766, 1.94, 0.78),
        DatasetKind::Cifar10 => (0.326, 0.343, 4.48, 2.13),
        DatasetKind::Cifar100 => (0.460, 0.491, 13.43, 5.18),
    };
    Published {
        baseline_acc,
        negotiated_acc,
        baseline_loss,
        negotiated_loss,
    }
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Medians over seeds of one arm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmMedians {
    pub final_acc: f64,
    pub final_loss: f64,
    pub best_val_loss: f64,
    pub max_val_loss: f64,
}

pub fn medians(results: &[SeedResult], arm: impl Fn(&SeedResult) -> &ArmSummary) -> ArmMedians {
    ArmMedians {
        final_acc: median(results.iter().map(|r| arm(r).final_acc)),
        final_loss: median(results.iter().map(|r| arm(r).final_loss)),
        best_val_loss: median(results.iter().map(|r| arm(r).best_val_loss)),
        max_val_loss: median(results.iter().map(|r| arm(r).max_val_loss)),
    }
}

pub fn markdown(cfg: &ExperimentConfig, results: &[SeedResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Baseline vs negotiated: {} ({} train / {} test, {} epochs)\n",
        cfg.dataset, cfg.subset.train, cfg.subset.test, cfg.train.epochs
    );
    let _ = writeln!(
        s,
        "Final-epoch test accuracy and loss; best = lowest validation loss over all epochs.\n"
    );
    let _ = writeln!(
        s,
        "| seed | baseline acc | negotiated acc | baseline loss | negotiated loss | baseline best loss (epoch) | negotiated best loss (epoch) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for r in results {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} ({}) | {:.4} ({}) |",
            r.seed,
            r.baseline.final_acc,
            r.negotiated.final_acc,
            r.baseline.final_loss,
            r.negotiated.final_loss,
            r.baseline.best_val_loss,
            r.baseline.best_epoch,
            r.negotiated.best_val_loss,
            r.negotiated.best_epoch
        );
    }
    let b = medians(results, |r| &r.baseline);
    let n = medians(results, |r| &r.negotiated);
    let _ = writeln!(
        s,
        "| median | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
        b.final_acc, n.final_acc, b.final_loss, n.final_loss, b.best_val_loss, n.best_val_loss
    );

    let p = published(cfg.dataset);
    let _ = writeln!(s, "## Measured medians and published reference\n");
    let _ = writeln!(
        s,
        "The published figures come from the original authors' runs, whose optimizer, epochs and seeds are unknown; they are context, not targets.\n"
    );
    let _ = writeln!(s, "| dataset | source | baseline acc | negotiated acc | baseline loss | negotiated loss |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| {} | measured median | {:.3} | {:.3} | {:.2} | {:.2} |",
        cfg.dataset, b.final_acc, n.final_acc, b.final_loss, n.final_loss
    );
    let _ = writeln!(
        s,
        "| {} | published | {:.3} | {:.3} | {:.2} | {:.2} |\n",
        cfg.dataset, p.baseline_acc, p.negotiated_acc, p.baseline_loss, p.negotiated_loss
    );
    let _ = writeln!(
        s,
        "Accuracy delta (negotiated - baseline): measured {:+.1} points, published {:+.1} points.  ",
        100.0 * (n.final_acc - b.final_acc),
        100.0 * (p.negotiated_acc - p.baseline_acc)
    );
    let _ = writeln!(
        s,
        "Loss ratio (negotiated / baseline): measured {:.2}, published {:.2}.",
        n.final_loss / b.final_loss,
        p.negotiated_loss / p.baseline_loss
    );
    s
}

#[derive(Serialize)]
struct CsvRow<'a> {
    seed: &'a str,
    arm: &'a str,
    final_val_acc: f64,
    final_val_loss: f64,
    best_val_loss: f64,
    best_epoch: Option<usize>,
    max_val_loss: f64,
}

/// One row per seed and arm, then one median row per arm.
pub fn csv(results: &[SeedResult]) -> Result<String, negotiated::Error> {
    let mut w = ::csv::Writer::from_writer(Vec::new());
    for r in results {
        let seed = r.seed.to_string();
        for (arm, a) in [("baseline", &r.baseline), ("negotiated", &r.negotiated)] {
            w.serialize(CsvRow {
                seed: &seed,
                arm,
                final_val_acc: a.final_acc,
                final_val_loss: a.final_loss,
                best_val_loss: a.best_val_loss,
                best_epoch: Some(a.best_epoch),
                max_val_loss: a.max_val_loss,
            })?;
        }
    }
    for (arm, m) in [
        ("baseline", medians(results, |r| &r.baseline)),
        ("negotiated", medians(results, |r| &r.negotiated)),
    ] {
        w.serialize(CsvRow {
            seed: "median",
            arm,
            final_val_acc: m.final_acc,
            final_val_loss: m.final_loss,
            best_val_loss: m.best_val_loss,
            best_epoch: None,
            max_val_loss: m.max_val_loss,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| ::csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median([3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}

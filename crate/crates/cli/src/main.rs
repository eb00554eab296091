use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use negotiate_cli::experiment::{self, SourceData};
use negotiate_cli::{exit, report, CliError, ExperimentConfig};
use negotiated::data::{default_data_dir, DatasetKind};
use negotiated::negotiation::{AnchorMode, NegotiationConfig};
use negotiated::nn::Preset;

/// Baseline and negotiated-label training experiments.
#[derive(Parser)]
#[command(name = "negotiate", version)]
struct Cli {
    /// Dataset root (default: $NEGOTIATE_DATA_DIR, else ./data of the workspace).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check dataset files against the SHA-256 manifest.
    VerifyData {
        /// Manifest path (default: <data dir>/manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train one configuration and write its artifacts.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (default: runs/<dataset>-<arm>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run baseline and negotiated arms over several seeds and report.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Output directory (default: runs/compare-<dataset>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer kind and a whole preset.
    Gradcheck {
        #[arg(long, default_value = "mnist")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; excludes every other run flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Training subset size.
    #[arg(long = "train")]
    train_count: Option<usize>,
    /// Test subset size.
    #[arg(long = "test")]
    test_count: Option<usize>,
    /// Seed for the subset draw and for training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    negotiate: Option<Switch>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    initial_rate: Option<f64>,
    #[arg(long)]
    increment: Option<f64>,
    #[arg(long)]
    max_rate: Option<f64>,
    #[arg(long)]
    anchor: Option<AnchorMode>,
    /// Draw subsets without per-class balancing.
    #[arg(long)]
    no_stratify: bool,
    /// Write negotiated labels after every negotiation phase.
    #[arg(long)]
    export_labels: bool,
}

impl RunArgs {
    fn schedule_flags(&self) -> bool {
        self.initial_rate.is_some() || self.increment.is_some() || self.max_rate.is_some() || self.anchor.is_some()
    }

    fn any_run_flag(&self) -> bool {
        self.dataset.is_some()
            || self.preset.is_some()
            || self.train_count.is_some()
            || self.test_count.is_some()
            || self.seed.is_some()
            || self.epochs.is_some()
            || self.negotiate.is_some()
            || self.lr.is_some()
            || self.momentum.is_some()
            || self.batch_size.is_some()
            || self.schedule_flags()
            || self.no_stratify
            || self.export_labels
    }

    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        if let Some(path) = &self.config {
            if self.any_run_flag() {
                return Err(CliError::Usage("--config cannot be combined with other run flags".into()));
            }
            let cfg = ExperimentConfig::load(path)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let dataset = self
            .dataset
            .ok_or_else(|| CliError::Usage("either --config or --dataset is required".into()))?;
        let mut cfg = ExperimentConfig::regime(dataset, self.seed.unwrap_or(0));
        cfg.preset = self.preset;
        if let Some(n) = self.train_count {
            cfg.subset.train = n;
        }
        if let Some(n) = self.test_count {
            cfg.subset.test = n;
        }
        cfg.subset.stratified = !self.no_stratify;
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        let sgd = &mut cfg.train.sgd;
        sgd.learning_rate = self.lr.unwrap_or(sgd.learning_rate);
        sgd.momentum = self.momentum.unwrap_or(sgd.momentum);
        sgd.batch_size = self.batch_size.unwrap_or(sgd.batch_size);
        match self.negotiate {
            Some(Switch::Off) => {
                if self.schedule_flags() {
                    return Err(CliError::Usage("schedule flags need --negotiate on".into()));
                }
                if self.export_labels {
                    return Err(CliError::Usage("--export-labels needs --negotiate on".into()));
                }
                cfg.train.negotiation = None;
            }
            Some(Switch::On) | None => {
                let d = NegotiationConfig::default();
                cfg.train.negotiation = Some(NegotiationConfig {
                    initial_rate: self.initial_rate.unwrap_or(d.initial_rate),
                    increment: self.increment.unwrap_or(d.increment),
                    max_rate: self.max_rate.unwrap_or(d.max_rate),
                    anchor: self.anchor.unwrap_or(d.anchor),
                });
            }
        }
        cfg.export_labels = self.export_labels;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn arm_name(cfg: &ExperimentConfig) -> &'static str {
    if cfg.train.negotiation.is_some() {
        "negotiated"
    } else {
        "baseline"
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let root = cli.data_dir.unwrap_or_else(default_data_dir);
    match cli.command {
        Command::VerifyData { manifest } => {
            let manifest = manifest.unwrap_or_else(|| root.join("manifest.json"));
            let base = manifest.parent().unwrap_or(Path::new("."));
            let statuses = experiment::verify_data(&manifest, base)?;
            for (path, _) in &statuses {
                println!("ok  {}", path.display());
            }
            println!("{} file(s) verified", statuses.len());
            Ok(exit::OK)
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.dataset, arm_name(&cfg), cfg.train.seed))
            });
            let source = SourceData::load(cfg.dataset, &root)?;
            let outcome = experiment::run(&cfg, &source, Some(&out))?;
            let last = outcome.final_record();
            let best = outcome.best_record();
            println!(
                "{} {}: final val loss {:.4} acc {:.4}; best val loss {:.4} at epoch {}; artifacts in {}",
                cfg.dataset,
                arm_name(&cfg),
                last.val_loss,
                last.val_acc,
                best.val_loss,
                best.epoch,
                out.display()
            );
            Ok(exit::OK)
        }
        Command::Compare { run, seeds, out } => {
            let cfg = run.resolve()?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("compare-{}", cfg.dataset)));
            let source = SourceData::load(cfg.dataset, &root)?;
            let results = experiment::compare(&cfg, &seeds, &source, Some(&out))?;
            print!("{}", report::markdown(&cfg, &results));
            Ok(exit::OK)
        }
        Command::Gradcheck { preset, seed, batch } => {
            let report = experiment::gradcheck(preset, seed, batch)?;
            print!("{report}");
            for (layer, err) in report.per_layer_max() {
                println!("max rel err {layer:<22} {err:.3e}");
            }
            if report.passed() {
                println!("PASS (tolerance {:.0e})", report.tolerance);
                Ok(exit::OK)
            } else {
                let failed: Vec<String> = report.failures().map(|e| e.name()).collect();
                println!("FAIL: {}", failed.join(", "));
                Ok(exit::RUNTIME)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

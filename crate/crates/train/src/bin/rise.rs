//! Command-line entry point: data generation, training, evaluation,
//! ablation grids and density reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rise_core::data::Dataset;
use rise_core::filter::FilterMode;
use rise_model::SegModel;
use rise_train::ablation::{ablate_filters, ablate_pseudo_box, AblationTable, PseudoBoxVariant, RunCache, MASK_GAMMAS};
use rise_train::density::{report_density, DensityTrace};
use rise_train::{evaluate, train_with, Experiment, Result, Split, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "rise", version, about = "Semi-supervised instance segmentation on pseudo-sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file: the reference schedule, or the desk-scale
    /// setup when `--toy` gives a step count.
    InitConfig {
        #[arg(long)]
        toy: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic shapes benchmark as `train/` and `test/`
    /// dataset directories.
    GenData {
        /// Takes resolution and sizes from the config's `data` table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        test_images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write checkpoints, logs and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `gen-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        labeled_fraction: Option<f64>,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the supervised-only baseline instead.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask AP of a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Detection thresholds come from this config when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare pseudo-label filter modes, median over the configured seeds.
    AblateFilters {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over mask thresholds and pseudo-box variants.
    AblatePseudoBox {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retained-score density maps from a run's `trace.json`.
    ReportDensity {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn experiment(cfg: &TrainConfig, data: Option<&Path>) -> Result<Experiment> {
    match (data, &cfg.data) {
        (Some(dir), _) => Experiment::load(dir),
        (None, Some(d)) => Experiment::generate(d),
        (None, None) => Err(TrainError::config("pass --data or add a [data] table to the config")),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

fn write_table(table: &AblationTable, out: &Path, name: &str) -> Result<()> {
    write(&out.join(format!("{name}.csv")), &table.to_csv())?;
    let json = serde_json::to_string_pretty(table).map_err(|e| TrainError::parse(out, e))?;
    write(&out.join(format!("{name}.json")), &json)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { toy, out } => {
            let cfg = toy.map_or_else(TrainConfig::default, TrainConfig::toy);
            cfg.validate()?;
            write(&out, &cfg.to_toml()?)
        }
        Command::GenData {
            config,
            train_images,
            test_images,
            seed,
            out,
        } => {
            let mut d = match config {
                Some(path) => TrainConfig::load(&path)?.data.unwrap_or_default(),
                None => TrainConfig::toy(1).data.unwrap_or_default(),
            };
            d.train_images = train_images.unwrap_or(d.train_images);
            d.test_images = test_images.unwrap_or(d.test_images);
            d.seed = seed.unwrap_or(d.seed);
            let exp = Experiment::generate(&d)?;
            exp.save(&out)?;
            println!("wrote {} train and {} test images to {}", exp.train.len(), exp.test.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            labeled_fraction,
            seed,
            baseline,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(f) = labeled_fraction {
                cfg.labeled_fraction = f;
            }
            if baseline {
                cfg = cfg.baseline();
            }
            cfg.validate()?;
            let seed = seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
            let exp = experiment(&cfg, data.as_deref())?;
            let split = Split::new(&exp.train, cfg.labeled_fraction, seed)?;
            println!(
                "training {} steps: {} labeled, {} unlabeled images, seed {seed}",
                cfg.total_steps,
                split.labeled.len(),
                split.unlabeled.len()
            );
            let every = cfg.log_interval;
            let outcome = train_with(&cfg, &exp.train, &split, seed, Some(&exp.test), Some(&out), |r| {
                if (r.step + 1) % every == 0 {
                    let l = &r.losses;
                    println!(
                        "step {:>6} lr {:.1e} total {:.4} sup {:.4} embed {:.4} unsup {:.4} pseudo {:.1}",
                        r.step + 1,
                        r.learning_rate,
                        l.total,
                        l.supervised,
                        l.embed,
                        l.unsupervised,
                        l.pseudo_labels
                    );
                }
            })?;
            if let Some(m) = outcome.report.final_metrics {
                println!("test AP {:.4} AP50 {:.4} AP75 {:.4}", m.ap, m.ap50, m.ap75);
            }
            println!("outputs in {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
        } => {
            let model = SegModel::load(&checkpoint)?;
            let detect = match config {
                Some(path) => TrainConfig::load(&path)?.detect,
                None => Default::default(),
            };
            let dir = data.join(match split {
                SplitName::Train => "train",
                SplitName::Test => "test",
            });
            let set = Dataset::load(&dir)?;
            let m = evaluate(&model, &set, &detect)?;
            println!("{}", serde_json::to_string(&m).map_err(|e| TrainError::parse(&dir, e))?);
            Ok(())
        }
        Command::AblateFilters { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let exp = experiment(&cfg, data.as_deref())?;
            let modes = [FilterMode::CascadeTq, FilterMode::ThresholdOnly, FilterMode::QuantileOnly, FilterMode::CascadeQt];
            let table = ablate_filters(&cfg, &exp, &modes, &mut RunCache::default(), |m| eprintln!("{m}"))?;
            write_table(&table, &out, "filters")
        }
        Command::AblatePseudoBox { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let exp = experiment(&cfg, data.as_deref())?;
            let table = ablate_pseudo_box(&cfg, &exp, &MASK_GAMMAS, &PseudoBoxVariant::ALL, &mut RunCache::default(), |m| {
                eprintln!("{m}")
            })?;
            write_table(&table, &out, "pseudo_box")
        }
        Command::ReportDensity { trace, out } => {
            let trace = DensityTrace::load(&trace)?;
            for r in report_density(&trace, &out)? {
                println!("a0 {}: {} retained", r.a0, r.retained);
            }
            println!("figures in {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

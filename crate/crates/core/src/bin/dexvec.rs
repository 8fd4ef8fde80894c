use std::io;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dexvec::eval::{AblationOptions, ObfuscatedTest};
use dexvec::image::ABLATION_WIDTHS;
use dexvec::par::Exec;
use dexvec::store::{self, Attrition, Manifest, RunConfig, Selection, TrainMode};

#[derive(Parser)]
#[command(name = "dexvec", version, about = "DEX bytecode images and a 1-D CNN malware classifier")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Manifest file (JSON lines).
    #[arg(long, global = true, default_value = "manifest.jsonl")]
    manifest: PathBuf,
    /// Image cache directory.
    #[arg(long, global = true, default_value = "cache")]
    cache_dir: PathBuf,
    /// Network input width; overrides `input_width` from --config.
    #[arg(long, global = true)]
    size: Option<usize>,
    /// Base seed; overrides `seed` from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file overriding the run defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::read(path)?,
            None => RunConfig::default(),
        };
        if let Some(size) = self.size {
            cfg.input_width = size;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.manifest).with_context(|| format!("reading {}", self.manifest.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Turn APKs into cached images and write a manifest.
    Extract {
        /// Directory with `malware/` and `goodware/` subdirectories of .apk files.
        #[arg(long, conflicts_with = "list", required_unless_present = "list")]
        apk_dir: Option<PathBuf>,
        /// CSV with columns path,label[,dex_date][,obfuscated_of].
        #[arg(long)]
        list: Option<PathBuf>,
    },
    /// Train models and write checkpoints, histories and metrics.
    Train {
        #[arg(long, value_enum, default_value_t = Mode::Holdout)]
        mode: Mode,
        /// First test date for --mode temporal (YYYY-MM-DD).
        #[arg(long)]
        cutoff: Option<NaiveDate>,
        /// Fraction of obfuscated variants added to train/valid for --mode augmented.
        #[arg(long, default_value_t = 1.0)]
        obf_fraction: f64,
        /// Test set for --mode augmented.
        #[arg(long, value_enum, default_value_t = ObfTest::Base)]
        obf_test: ObfTest,
        /// Output directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a set of apps.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
    },
    /// ROC curve and AUC of a checkpoint; points go to --out as `fpr tpr` lines.
    Roc {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value = "roc.txt")]
        out: PathBuf,
    },
    /// Repeat the hold-out protocol at several input widths.
    Ablate {
        /// Comma-separated widths.
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_WIDTHS)]
        sizes: Vec<usize>,
        /// Keep partial pooling windows at widths too small for the standard layout.
        #[arg(long)]
        same_padding_fallback: bool,
        /// Directory for per-run metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset accounting: initial set, removals by reason, final set.
    Summary,
}

#[derive(Args)]
struct SelectionArgs {
    /// Evaluate the test ids of a saved split.
    #[arg(long, conflicts_with = "ids")]
    split: Option<PathBuf>,
    /// Evaluate the ids listed one per line.
    #[arg(long)]
    ids: Option<PathBuf>,
}

impl SelectionArgs {
    fn selection(&self) -> Selection {
        match (&self.split, &self.ids) {
            (Some(p), _) => Selection::Split(p.clone()),
            (_, Some(p)) => Selection::Ids(p.clone()),
            _ => Selection::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Holdout,
    Temporal,
    Augmented,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObfTest {
    Base,
    Obfuscated,
    AllObfuscated,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    let exec = common.exec();
    let stdout = io::stdout().lock();

    match cli.command {
        Command::Extract { apk_dir, list } => {
            let size = common.run_config()?.input_width;
            let inputs = match (apk_dir, list) {
                (Some(dir), _) => store::inputs_from_dir(&dir)?,
                (_, Some(list)) => store::inputs_from_list(&list)?,
                _ => bail!("either --apk-dir or --list is required"),
            };
            let manifest = store::extract(&inputs, &common.cache_dir, size, exec)?;
            manifest.write(&common.manifest)?;
            println!(
                "{} apps imaged, {} failed; manifest {}",
                manifest.records.len(),
                manifest.failures.len(),
                common.manifest.display()
            );
        }
        Command::Train { mode, cutoff, obf_fraction, obf_test, out } => {
            let cfg = common.run_config()?;
            let mode = match mode {
                Mode::Holdout => TrainMode::Holdout,
                Mode::Temporal => TrainMode::Temporal {
                    cutoff: cutoff.context("--mode temporal needs --cutoff")?,
                },
                Mode::Augmented => TrainMode::Augmented {
                    fraction: obf_fraction,
                    test: match obf_test {
                        ObfTest::Base => ObfuscatedTest::Base,
                        ObfTest::Obfuscated => ObfuscatedTest::Obfuscated,
                        ObfTest::AllObfuscated => ObfuscatedTest::AllObfuscated,
                    },
                },
            };
            store::cmd_train(&common.manifest()?, &common.cache_dir, &cfg, &mode, &out, exec, stdout)?;
        }
        Command::Eval { model, selection } => {
            let cfg = common.run_config()?;
            let manifest = common.manifest()?;
            store::cmd_eval(&model, &manifest, &common.cache_dir, &selection.selection(), cfg.threshold, exec, stdout)?;
        }
        Command::Roc { model, selection, out } => {
            let manifest = common.manifest()?;
            store::cmd_roc(&model, &manifest, &common.cache_dir, &selection.selection(), &out, exec, stdout)?;
        }
        Command::Ablate { sizes, same_padding_fallback, out } => {
            let cfg = common.run_config()?;
            let opts = AblationOptions { widths: sizes, repetitions: cfg.repetitions, seed: cfg.seed, same_padding_fallback };
            store::cmd_ablate(&common.manifest()?, &common.cache_dir, &cfg, &opts, out.as_deref(), exec, stdout)?;
        }
        Command::Summary => {
            print!("{}", Attrition(&common.manifest()?));
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdrl::config::{ExperimentConfig, Init};
use sdrl::data::{generate_dataset, DatasetKind, Manifest, PatchSet, Split};
use sdrl::objective::ObjectiveMode;
use sdrl::training::{self, plot};
use sdrl::Error;

#[derive(Parser, Debug)]
#[command(name = "sdrl", version, about = "Self-supervised pre-training and change detection on synthetic bitemporal imagery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dataset generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Pretrain,
    Cd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[arg(long, value_enum, default_value = "pretrain")]
        kind: Kind,
        #[arg(long)]
        scenes: Option<usize>,
        /// Scene side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Self-supervised pre-training.
    Pretrain {
        #[arg(long)]
        objective: Option<ObjectiveMode>,
        /// Pre-training dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train without stop-gradient (collapse diagnostic).
        #[arg(long)]
        debug_no_stopgrad: bool,
    },
    /// Supervised change-detection training on a label fraction.
    Finetune {
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        init: Option<Init>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Change-detection dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a fine-tuned model checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Collapse and inter-region angle report for a pre-training checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Render SVG curves from a metrics CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::ConfigInvalid(_) => ("config-invalid", 3),
        Error::DataMissing(_) | Error::EmptyDataset => ("data-missing", 4),
        Error::CheckpointIncompatible(_) => ("checkpoint-incompatible", 5),
        Error::NonFiniteLoss { .. } => ("non-finite-loss", 6),
        Error::Io { .. } | Error::Image { .. } | Error::Csv(_) | Error::Json(_) => ("io", 7),
        _ => ("internal", 1),
    }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_config(common: &Common) -> sdrl::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T, save: Option<&Path>) -> sdrl::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(path) = save {
        training::write_json(path, value)?;
    }
    Ok(())
}

fn run(cli: Cli) -> sdrl::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { kind, scenes, size, patch } => {
            let g = &mut cfg.generate;
            g.kind = match kind {
                Kind::Pretrain => DatasetKind::Pretrain,
                Kind::Cd => DatasetKind::Cd,
            };
            if let Some(seed) = cli.common.seed {
                g.seed = seed;
            }
            if let Some(n) = scenes {
                g.scenes = n;
            }
            if let Some(s) = size {
                g.scene.size = s;
            }
            if let Some(p) = patch {
                g.patch_size = p;
            }
            cfg.validate()?;
            let default = match kind {
                Kind::Pretrain => &cfg.data.pretrain,
                Kind::Cd => &cfg.data.cd,
            };
            let out = cli.common.out.clone().unwrap_or_else(|| default.clone());
            let m = generate_dataset(&cfg.generate, &out, cfg.threads)?;
            cfg.save_resolved(&out)?;
            let per_split: Vec<String> = Split::ALL.iter().map(|&s| format!("{:?} {}", s, m.records_in(s).len())).collect();
            println!("{} patches in {} ({})", m.records.len(), out.display(), per_split.join(", "));
        }
        Command::Pretrain { objective, data, debug_no_stopgrad } => {
            if let Some(o) = objective {
                cfg.objective.mode = o;
            }
            if debug_no_stopgrad {
                cfg.objective.stop_gradient = false;
            }
            if let Some(d) = data {
                cfg.data.pretrain = d;
            }
            cfg.validate()?;
            let out = out_dir(&cli.common, "runs/pretrain");
            let manifest = Manifest::load(&cfg.data.pretrain)?;
            let o = training::pretrain(&cfg, &manifest, &out)?;
            let last = o.record.epochs.last().expect("at least one epoch");
            println!(
                "best epoch {} of {}; final val loss {:.4}, collapse {:.4}; checkpoints in {}",
                o.best_epoch,
                o.record.epochs.len(),
                last.val_total,
                last.val_collapse_stat,
                out.display()
            );
        }
        Command::Finetune { fraction, init, checkpoint, data } => {
            let ft = &mut cfg.finetune;
            if let Some(f) = fraction {
                ft.fraction = f;
            }
            if let Some(c) = checkpoint {
                ft.checkpoint = Some(c);
                ft.init = Init::Checkpoint;
            }
            if let Some(i) = init {
                ft.init = i;
            }
            if let Some(d) = data {
                cfg.data.cd = d;
            }
            cfg.validate()?;
            let out = out_dir(&cli.common, "runs/finetune");
            let manifest = Manifest::load(&cfg.data.cd)?;
            let o = training::finetune(&cfg, &manifest, &out)?;
            print_json(&o.report, None)?;
        }
        Command::Eval { checkpoint, data, split } => {
            let data = data.unwrap_or(cfg.data.cd.clone());
            cfg.validate()?;
            let manifest = Manifest::load(&data)?;
            let set = PatchSet::load(&manifest, manifest.records_in(split.into()))?;
            if set.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut net = training::load_cdnet(&training::cdnet_config(&cfg), &checkpoint)?;
            let report = training::evaluate_cd(&mut net, &set, cfg.finetune.batch_size)?;
            let save = cli.common.out.as_ref().map(|d| {
                let _ = std::fs::create_dir_all(d);
                d.join("eval.json")
            });
            print_json(&report, save.as_deref())?;
        }
        Command::Probe { checkpoint, data, split } => {
            let data = data.unwrap_or(cfg.data.pretrain.clone());
            cfg.validate()?;
            let manifest = Manifest::load(&data)?;
            let set = PatchSet::load(&manifest, manifest.records_in(split.into()))?;
            let mut model = training::load_sdrl_model(&cfg, &checkpoint)?;
            let report = training::probe(&mut model, &set, cfg.pretrain.batch_size)?;
            let save = cli.common.out.as_ref().map(|d| {
                let _ = std::fs::create_dir_all(d);
                d.join("probe.json")
            });
            print_json(&report, save.as_deref())?;
        }
        Command::Plot { csv } => {
            let svg = cli.common.out.clone().unwrap_or_else(|| csv.with_extension("svg"));
            plot::plot_csv(&csv, &svg)?;
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDRL_LOG", "info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = category(&e);
            eprintln!("error [{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}

//! Command-line driver for the xmoda pipeline. Stage commands are
//! idempotent: each runs the experiment up to (and including) its stage,
//! reusing hash-verified artifacts from earlier invocations in the same
//! output directory.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use xmoda::checkpoint::Checkpoint;
use xmoda::pipeline::{
    resume, run_pipeline, run_pipeline_until, Arm, ExperimentConfig, ExperimentManifest,
};
use xmoda::translators::{translate_volume, Direction};
use xmoda::volume::{load_volume, save_volume};

#[derive(Parser)]
#[command(
    name = "xmoda",
    about = "Multi-view cross-modality translation and segmentation on phantom volumes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; falls back to $XMODA_OUT, then the config's out_root,
    /// then ./xmoda-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated arms: cyclegan, qsattn, multiview. Default: all.
    #[arg(long)]
    arms: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic phantom dataset.
    Phantom(CommonArgs),
    /// Resample / crop / resize the dataset into network space.
    Preprocess(CommonArgs),
    /// Train one unpaired translator.
    TrainTranslate {
        #[command(flatten)]
        common: CommonArgs,
        /// "cyclegan" or "qsattn".
        #[arg(long)]
        model: String,
    },
    /// Translate a single preprocessed volume through a checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base segmenter (self-training round 0) for one arm/mode.
    TrainSeg {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        arm: String,
        /// "2d" or "3d".
        #[arg(long)]
        mode: String,
    },
    /// Run the pseudo-label self-training loop for one arm (both members).
    SelfTrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        arm: String,
        /// Override the configured number of rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the configured confidence floor.
        #[arg(long)]
        confidence_floor: Option<f64>,
    },
    /// Evaluate all requested arms on the paired validation cases.
    Evaluate(CommonArgs),
    /// Run every stage.
    RunAll(CommonArgs),
    /// Continue an interrupted run from its manifest.
    Resume {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Re-emit the qualitative report (montage).
    Report(CommonArgs),
    /// Write a desk-scale starter config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn out_root(cli_out: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli_out {
        return p.clone();
    }
    if let Ok(env) = std::env::var("XMODA_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    cfg.out_root
        .clone()
        .unwrap_or_else(|| PathBuf::from("xmoda-out"))
}

fn parse_arms(spec: &Option<String>) -> Result<BTreeSet<Arm>> {
    match spec {
        None => Ok([Arm::Cyclegan, Arm::Qsattn, Arm::Multiview]
            .into_iter()
            .collect()),
        Some(s) => {
            let mut set = BTreeSet::new();
            for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                set.insert(Arm::parse(tok)?);
            }
            if set.is_empty() {
                bail!("--arms selected nothing");
            }
            Ok(set)
        }
    }
}

fn load(common: &CommonArgs) -> Result<(ExperimentConfig, BTreeSet<Arm>, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    let arms = parse_arms(&common.arms)?;
    let root = out_root(&common.out, &cfg);
    Ok((cfg, arms, root))
}

fn print_summary(manifest: &ExperimentManifest, root: &Path) {
    println!("output root: {}", root.display());
    println!("stages completed: {}", manifest.stages.len());
    if let Some(summary) = &manifest.summary {
        println!("mean validation Dice:");
        for (arm, d) in &summary.dice_mean {
            println!("  {arm:>10}: without ST {:.4}   with ST {:.4}", d.wo_st, d.w_st);
        }
        if let Some(v) = summary.ordering.multiview_gt_singles_wo_st {
            println!("multi-view beats both single arms (w/o ST): {v}");
        }
        if let Some(v) = summary.ordering.st_improves_every_arm {
            println!("self-training improves every arm: {v}");
        }
    }
}

fn run_until(common: &CommonArgs, stage: Option<String>) -> Result<()> {
    let (cfg, arms, root) = load(common)?;
    let manifest = run_pipeline_until(&cfg, &arms, &root, stage.as_deref())?;
    print_summary(&manifest, &root);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Phantom(c) => run_until(&c, Some("phantom".into())),
        Cmd::Preprocess(c) => run_until(&c, Some("preprocess".into())),
        Cmd::TrainTranslate { common, model } => {
            if model != "cyclegan" && model != "qsattn" {
                bail!("--model must be cyclegan or qsattn");
            }
            run_until(&common, Some(format!("train-translate:{model}")))
        }
        Cmd::Translate { ckpt, input, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let vol = load_volume(&input)?;
            let translated = translate_volume(&ck, &vol, Direction::SToT)?;
            save_volume(&translated, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::TrainSeg { common, arm, mode } => {
            if mode != "2d" && mode != "3d" {
                bail!("--mode must be 2d or 3d");
            }
            Arm::parse(&arm)?;
            run_until(&common, Some(format!("selftrain:{arm}:{mode}")))
        }
        Cmd::SelfTrain {
            common,
            arm,
            rounds,
            confidence_floor,
        } => {
            Arm::parse(&arm)?;
            let (mut cfg, arms, root) = load(&common)?;
            if let Some(r) = rounds {
                cfg.self_training.rounds = r;
            }
            if let Some(f) = confidence_floor {
                cfg.self_training.confidence_floor = f;
            }
            let manifest =
                run_pipeline_until(&cfg, &arms, &root, Some(&format!("selftrain:{arm}:3d")))?;
            print_summary(&manifest, &root);
            Ok(())
        }
        Cmd::Evaluate(c) => run_until(&c, Some("evaluate".into())),
        Cmd::RunAll(c) => {
            let (cfg, arms, root) = load(&c)?;
            let manifest = run_pipeline(&cfg, &arms, &root)?;
            print_summary(&manifest, &root);
            Ok(())
        }
        Cmd::Resume { manifest } => {
            let m = resume(&manifest)?;
            let root = manifest.parent().unwrap_or(Path::new("."));
            print_summary(&m, root);
            Ok(())
        }
        Cmd::Report(c) => run_until(&c, Some("report".into())),
        Cmd::InitConfig { out, seed } => {
            let cfg = xmoda::pipeline::smoke_config(seed);
            let text = serde_json::to_string_pretty(&cfg)?;
            std::fs::write(&out, text + "\n")?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

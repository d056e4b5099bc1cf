use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use protoloc::dataset;
use protoloc::encoder::Checkpoint;
use protoloc::episodic::RepMode;
use protoloc::harness::{self, report_emit, ComparisonReport, Phase, Preset, RunConfig};
use protoloc::Result;

#[derive(Parser)]
#[command(name = "protoloc", version, about = "Few-shot classification with localized class representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Base,
    Ours,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prototype,
    Refined,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into `dataset`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the encoder with a linear head on the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic training from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on seeded episodes and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Localize images by id and write box overlays.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let preset = match c.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Full => Preset::Full,
    };
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::preset(preset),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let m = harness::gen_data(&cfg, &cfg.dataset)?;
            for (split, entry) in &m.splits {
                println!("{split}: {} samples", entry.count);
            }
        }
        Command::Pretrain { common, out } => {
            let cfg = load_config(&common)?;
            let (ckpt, outcome) = harness::pretrain_stage(&cfg)?;
            ckpt.save(&out)?;
            let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrain: {} steps, loss {first:.4} -> {last:.4}, train accuracy {:.4}",
                outcome.losses.len(),
                outcome.final_train_accuracy
            );
        }
        Command::Train {
            common,
            phase,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            let phase = match phase {
                PhaseArg::Base => Phase::Base,
                PhaseArg::Ours => Phase::Ours,
            };
            let (ckpt, outcome) = harness::train_stage(&cfg, Checkpoint::load(&checkpoint)?, phase)?;
            ckpt.save(&out)?;
            let (first, last) = harness::train::fifth_means(&outcome.losses);
            println!(
                "train {}: {} episodes, mean loss first fifth {first:.4}, last fifth {last:.4}",
                phase.name(),
                outcome.losses.len()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            mode,
            split,
            workers,
            report,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = dataset::load_split(&cfg.dataset, &split)?;
            let run_mode = |m| harness::evaluate(&ckpt.params, &data, &cfg, m, workers);
            match mode {
                ModeArg::Prototype | ModeArg::Refined => {
                    let m = if matches!(mode, ModeArg::Prototype) {
                        RepMode::Prototype
                    } else {
                        RepMode::Refined
                    };
                    let r = run_mode(m)?;
                    println!(
                        "accuracy {:.4} ± {:.4}, IoU {:.4}, CorLoc {:.4}",
                        r.mean_accuracy, r.ci95, r.loc_mean_iou, r.corloc
                    );
                    report_emit(&r, &report)?;
                }
                ModeArg::Both => {
                    let c = ComparisonReport::new(run_mode(RepMode::Prototype)?, run_mode(RepMode::Refined)?);
                    for r in [&c.prototype, &c.refined] {
                        println!(
                            "{:?}: accuracy {:.4} ± {:.4}, IoU {:.4}, CorLoc {:.4}",
                            r.mode, r.mean_accuracy, r.ci95, r.loc_mean_iou, r.corloc
                        );
                    }
                    report_emit(&c, &report)?;
                }
            }
        }
        Command::Localize {
            common,
            checkpoint,
            split,
            ids,
            out_dir,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = dataset::load_split(&cfg.dataset, &split)?;
            for l in harness::localize_cmd(&ckpt.params, &data, &ids, cfg.eval_localize_config(), &out_dir)? {
                println!("{} {} {} {} {} {:.6}", l.id, l.bbox.y0, l.bbox.x0, l.bbox.y1, l.bbox.x1, l.iou);
            }
        }
    }
    eprintln!("wall time {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
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

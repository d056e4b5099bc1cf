//! Pipeline stages behind the command-line tool: data generation,
//! pretraining, episodic training, evaluation and localization.

pub mod config;
pub mod eval;
pub mod overlay;
pub mod report;
pub mod train;

use std::path::Path;

use crate::dataset::{self, derive_seed, Manifest};
use crate::encoder::{Checkpoint, EncoderParams};
use crate::episodic::RepMode;
use crate::error::Result;

pub use config::{Preset, RunConfig};
pub use eval::evaluate;
pub use overlay::localize_cmd;
pub use report::{report_emit, ComparisonReport, EvalReport};
pub use train::{pretrain, train_episodic, Phase};

const INIT_STREAM: u64 = 4;

pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    dataset::generate_dataset(&cfg.dataset_spec(), cfg.seed, out_dir)
}

/// Initializes the encoder from `cfg.seed` and pretrains it on the train split.
pub fn pretrain_stage(cfg: &RunConfig) -> Result<(Checkpoint, train::PretrainOutcome)> {
    cfg.validate()?;
    let split = dataset::load_split(&cfg.dataset, "train")?;
    let init = EncoderParams::init(&cfg.arch, derive_seed(&[cfg.seed, INIT_STREAM]))?;
    let (params, outcome) = pretrain(init, &split, &cfg.pretrain, cfg.seed)?;
    let ckpt = Checkpoint {
        params,
        seed: cfg.seed,
        stage: "pretrain".into(),
    };
    Ok((ckpt, outcome))
}

pub fn train_stage(cfg: &RunConfig, ckpt: Checkpoint, phase: Phase) -> Result<(Checkpoint, train::TrainOutcome)> {
    cfg.validate()?;
    let split = dataset::load_split(&cfg.dataset, "train")?;
    let (params, outcome) = train_episodic(ckpt.params, &split, cfg, phase)?;
    let ckpt = Checkpoint {
        params,
        seed: cfg.seed,
        stage: phase.name().into(),
    };
    Ok((ckpt, outcome))
}

pub fn eval_stage(cfg: &RunConfig, ckpt: &Checkpoint, split: &str, mode: RepMode, workers: usize) -> Result<EvalReport> {
    let data = dataset::load_split(&cfg.dataset, split)?;
    evaluate(&ckpt.params, &data, cfg, mode, workers)
}

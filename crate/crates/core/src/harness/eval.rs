//! Episodic evaluation: classification accuracy with a confidence interval
//! and query localization quality.

use rayon::prelude::*;

use crate::dataset::{derive_seed, sample_episode, task_rng, SplitData};
use crate::encoder::FeatureExtractor;
use crate::episodic::{self, ClassRepresentation, Episode, RepMode, SupportVector};
use crate::error::{Error, Result};
use crate::localization::{self, LocalizeConfig};
use crate::ops;
use crate::roi::{self, RoiConfig, RoiItem};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::report::{ci95, EvalReport};

const EVAL_STREAM: u64 = 3;

/// Outcome of one evaluation task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub accuracy: f64,
    pub iou: Vec<f64>,
}

/// Representations that classify the episode's queries.
pub fn episode_representations(
    episode: &Episode,
    support_fms: &[Tensor],
    mode: RepMode,
    localize: LocalizeConfig,
    roi_cfg: RoiConfig,
) -> Result<Vec<ClassRepresentation>> {
    let embeddings: Vec<Vec<f64>> = support_fms.iter().map(ops::global_avg_pool).collect::<Result<_>>()?;
    let mut groups: Vec<Vec<SupportVector<'_>>> = vec![Vec::new(); episode.n_way];
    for (s, e) in episode.support.iter().zip(&embeddings) {
        groups[s.class].push(SupportVector { id: s.id, vector: e });
    }
    let prototypes = episodic::compute_prototypes(&groups)?;
    if mode == RepMode::Prototype {
        return Ok(prototypes);
    }
    let extents = episode.image_extents();
    let boxes = episodic::propose_support_boxes(episode, support_fms, &prototypes, localize)?;
    let mut items: Vec<Vec<RoiItem<'_>>> = vec![Vec::new(); episode.n_way];
    for ((s, fm), bbox) in episode.support.iter().zip(support_fms).zip(boxes) {
        items[s.class].push(RoiItem { id: s.id, fm, bbox });
    }
    items
        .iter()
        .enumerate()
        .map(|(c, it)| roi::refine_representation(c, it, extents, roi_cfg))
        .collect()
}

/// Classifies and localizes every query of `episode`.
pub fn evaluate_episode<F: FeatureExtractor + ?Sized>(
    extractor: &F,
    episode: &Episode,
    mode: RepMode,
    localize: LocalizeConfig,
    roi_cfg: RoiConfig,
) -> Result<TaskResult> {
    episode.validate()?;
    let support_fms: Vec<Tensor> = episode
        .support
        .iter()
        .map(|s| extractor.feature_map(&s.image))
        .collect::<Result<_>>()?;
    let reps = episode_representations(episode, &support_fms, mode, localize, roi_cfg)?;
    let (h, w) = episode.image_extents();
    let mut correct = 0usize;
    let mut iou = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        let fm = extractor.feature_map(&q.image)?;
        let e = ops::global_avg_pool(&fm)?;
        let pred = episodic::classify(&e, &reps)?;
        correct += (pred == q.class) as usize;
        let b = localization::localize_query(&fm, &reps[pred].vector, localize, h, w)?;
        iou.push(b.iou(&q.gt_box));
    }
    Ok(TaskResult {
        accuracy: correct as f64 / episode.queries.len() as f64,
        iou,
    })
}

/// Evaluates `cfg.eval.tasks` seeded tasks on `split` using `workers`
/// threads. Task `t` depends only on `(cfg.seed, t)`, and results are
/// reduced in task order, so the report is independent of `workers`.
pub fn evaluate<F: FeatureExtractor + ?Sized>(
    extractor: &F,
    split: &SplitData,
    cfg: &RunConfig,
    mode: RepMode,
    workers: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let master = derive_seed(&[cfg.seed, EVAL_STREAM]);
    let localize = cfg.eval_localize_config();
    let e = &cfg.eval;
    let results: Vec<TaskResult> = pool.install(|| {
        (0..e.tasks)
            .into_par_iter()
            .map(|t| {
                let ep = sample_episode(split, e.n_way, e.k_shot, e.queries, &mut task_rng(master, t as u64))?;
                evaluate_episode(extractor, &ep, mode, localize, cfg.roi)
            })
            .collect::<Result<_>>()
    })?;
    Ok(summarize(results, split, cfg, mode))
}

fn summarize(results: Vec<TaskResult>, split: &SplitData, cfg: &RunConfig, mode: RepMode) -> EvalReport {
    let per_task_accuracy: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let all_iou: Vec<f64> = results.iter().flat_map(|r| r.iou.iter().copied()).collect();
    let n = per_task_accuracy.len() as f64;
    EvalReport {
        mode,
        split: split.name.clone(),
        n_way: cfg.eval.n_way,
        k_shot: cfg.eval.k_shot,
        queries_per_class: cfg.eval.queries,
        tasks: cfg.eval.tasks,
        seed: cfg.seed,
        mean_accuracy: per_task_accuracy.iter().sum::<f64>() / n,
        ci95: ci95(&per_task_accuracy),
        loc_mean_iou: all_iou.iter().sum::<f64>() / all_iou.len() as f64,
        corloc: all_iou.iter().filter(|&&v| v >= 0.5).count() as f64 / all_iou.len() as f64,
        per_task_accuracy,
        config: cfg.clone(),
    }
}

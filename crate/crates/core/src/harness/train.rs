//! Supervised pretraining with a linear head and episodic fine-tuning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, sample_episode, SplitData};
use crate::encoder::{self, EncoderParams};
use crate::episodic::{self, RepMode};
use crate::error::{Error, Result};
use crate::ops;

use super::config::{PretrainConfig, RunConfig};

const PRETRAIN_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Linear classifier over embeddings: `z = Wᵀe + b`, `W` stored `D×C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    /// Glorot-uniform weights, zero bias.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let a = (6.0 / (dim + classes) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            classes,
            weights: (0..dim * classes).map(|_| rng.gen_range(-a..a)).collect(),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, e: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (d, &ev) in e.iter().enumerate() {
            let row = &self.weights[d * self.classes..][..self.classes];
            z.iter_mut().zip(row).for_each(|(zc, w)| *zc += ev * w);
        }
        z
    }
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    encoder: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn pretrain_sample(params: &EncoderParams, head: &LinearHead, image: &crate::Tensor, label: usize) -> Result<SampleGrad> {
    let (fm, cache) = encoder::forward(params, image)?;
    let e = ops::global_avg_pool(&fm)?;
    let z = head.logits(&e);
    let loss = episodic::cross_entropy_from_logits(&z, label)?;
    let mut dz = episodic::softmax(&z);
    let pred = (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b });
    dz[label] -= 1.0;
    let c = head.classes;
    let mut weights = vec![0.0; head.weights.len()];
    let mut de = vec![0.0; head.dim];
    for d in 0..head.dim {
        let row = &head.weights[d * c..][..c];
        de[d] = row.iter().zip(&dz).map(|(w, g)| w * g).sum();
        weights[d * c..][..c].iter_mut().zip(&dz).for_each(|(gw, g)| *gw = e[d] * g);
    }
    let (h, w, _) = fm.dims3()?;
    let enc = encoder::backward(params, &cache, &ops::gap_vjp(h, w, &de))?;
    Ok(SampleGrad {
        loss,
        correct: pred == label,
        encoder: enc,
        weights,
        bias: dz,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// Mean minibatch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Training accuracy of the last epoch, measured during the pass.
    pub final_train_accuracy: f64,
    pub head_classes: usize,
}

/// Trains the encoder and a throwaway linear head on every sample of
/// `split` with minibatch SGD on cross-entropy. Classes are indexed in
/// ascending label order.
pub fn pretrain(
    params: EncoderParams,
    split: &SplitData,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderParams, PretrainOutcome)> {
    if split.is_empty() {
        return Err(Error::InsufficientData(format!("split {} is empty", split.name)));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("pretrain.batch must be positive".into()));
    }
    let classes: Vec<usize> = split.by_class().into_keys().collect();
    let targets: Vec<usize> = split
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label comes from the split"))
        .collect();
    let dim = params.arch().feature_dim();
    let mut head = LinearHead::init(dim, classes.len(), derive_seed(&[seed, PRETRAIN_STREAM]));
    let mut params = params;
    let mut losses = Vec::new();
    let mut final_train_accuracy = 0.0;
    let mut order: Vec<usize> = (0..split.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, PRETRAIN_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch) {
            let grads: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| pretrain_sample(&params, &head, &split.images[i], targets[i]))
                .collect::<Result<_>>()?;
            let n = batch.len() as f64;
            let mut g_enc = vec![0.0; params.len()];
            let mut g_w = vec![0.0; head.weights.len()];
            let mut g_b = vec![0.0; head.classes];
            let mut loss = 0.0;
            for g in &grads {
                loss += g.loss;
                correct += g.correct as usize;
                g_enc.iter_mut().zip(&g.encoder).for_each(|(a, b)| *a += b);
                g_w.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
                g_b.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
            }
            g_enc.iter_mut().for_each(|v| *v /= n);
            params = encoder::sgd_step(&params, &g_enc, cfg.lr)?;
            head.weights.iter_mut().zip(&g_w).for_each(|(w, g)| *w -= cfg.lr * g / n);
            head.bias.iter_mut().zip(&g_b).for_each(|(b, g)| *b -= cfg.lr * g / n);
            losses.push(loss / n);
        }
        final_train_accuracy = correct as f64 / split.len() as f64;
    }
    Ok((
        params,
        PretrainOutcome {
            losses,
            final_train_accuracy,
            head_classes: classes.len(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Prototype loss only.
    Base,
    /// Prototype loss plus the weighted refined-representation loss.
    Ours,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Phase::Base),
            "ours" => Ok(Phase::Ours),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Optimized loss of every episode, before its update.
    pub losses: Vec<f64>,
}

/// Runs `epochs × episodes_per_epoch` seeded episodes from `split`, one SGD
/// step per episode. Episode `t` is drawn from a stream keyed by
/// `(seed, t)` only, so both phases see the same episode sequence.
pub fn train_episodic(
    params: EncoderParams,
    split: &SplitData,
    cfg: &RunConfig,
    phase: Phase,
) -> Result<(EncoderParams, TrainOutcome)> {
    let epochs = match phase {
        Phase::Base => cfg.train.epochs_base,
        Phase::Ours => cfg.train.epochs_ours,
    };
    let mode = match phase {
        Phase::Base => RepMode::Prototype,
        Phase::Ours => RepMode::Refined,
    };
    let episode_cfg = cfg.train_episode_config();
    let total = epochs * cfg.train.episodes_per_epoch;
    let mut params = params;
    let mut losses = Vec::with_capacity(total);
    for t in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TRAIN_STREAM, t as u64]));
        let ep = sample_episode(split, cfg.train.n_way, cfg.train_k_shot(), cfg.train.queries, &mut rng)?;
        let g = episodic::episode_gradient(&params, &ep, mode, &episode_cfg)?;
        losses.push(g.loss.loss);
        params = encoder::sgd_step(&params, &g.grad, cfg.train.lr)?;
    }
    Ok((params, TrainOutcome { losses }))
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Mean of the first and of the last fifth of `values` (at least one value each).
pub fn fifth_means(values: &[f64]) -> (f64, f64) {
    let w = (values.len() / 5).max(1).min(values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean(&values[..w]), mean(&values[values.len() - w..]))
}

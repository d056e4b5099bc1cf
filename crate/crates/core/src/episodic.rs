//! Class representations, the nearest-representation classifier, the
//! distance-softmax losses and their gradient through a whole episode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams};
use crate::error::{shape_err, Error, Result};
use crate::localization::{self, BoundingBox, LocalizeConfig};
use crate::ops;
use crate::roi::{self, RoiConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    /// Mean of the class's support embeddings.
    Prototype,
    /// Mean of the class's support RoI features.
    Refined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRepresentation {
    pub class: usize,
    pub vector: Vec<f64>,
    pub kind: RepKind,
}

/// Which representation an episode is classified and trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepMode {
    Prototype,
    Refined,
}

impl std::str::FromStr for RepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(RepMode::Prototype),
            "refined" => Ok(RepMode::Refined),
            other => Err(Error::Config(format!("unknown representation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_roi: f64,
}

impl LossConfig {
    /// Temperature 64; `lambda_roi` is 1.0 for one-shot and 0.5 otherwise.
    pub fn for_shots(k_shot: usize) -> Self {
        Self {
            temperature: 64.0,
            lambda_roi: if k_shot == 1 { 1.0 } else { 0.5 },
        }
    }
}

/// One image of an episode. `id` is the sample's index in its split and
/// fixes the summation order of class means.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub id: usize,
    pub image: Tensor,
    pub class: usize,
    pub gt_box: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub support: Vec<EpisodeItem>,
    pub queries: Vec<EpisodeItem>,
    pub split: String,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![0usize; self.n_way];
        for item in &self.support {
            *counts.get_mut(item.class).ok_or(Error::Index {
                index: item.class,
                len: self.n_way,
            })? += 1;
        }
        if counts.iter().any(|&c| c != self.k_shot) {
            return Err(Error::InsufficientData(format!(
                "support counts {counts:?} are not {} per class",
                self.k_shot
            )));
        }
        if self.queries.len() != self.n_way * self.queries_per_class {
            return Err(Error::InsufficientData(format!(
                "{} queries for {}-way with {} per class",
                self.queries.len(),
                self.n_way,
                self.queries_per_class
            )));
        }
        if let Some(q) = self.queries.iter().find(|q| q.class >= self.n_way) {
            return Err(Error::Index {
                index: q.class,
                len: self.n_way,
            });
        }
        Ok(())
    }

    /// Image `(height, width)`, taken from the first support image.
    pub fn image_extents(&self) -> (usize, usize) {
        let s = self.support[0].image.shape();
        (s[0], s[1])
    }
}

/// A support embedding tagged with its sample id.
#[derive(Clone, Copy, Debug)]
pub struct SupportVector<'a> {
    pub id: usize,
    pub vector: &'a [f64],
}

/// Mean of `vectors` summed in ascending id order.
fn ordered_mean(class: usize, vectors: &[SupportVector<'_>]) -> Result<Vec<f64>> {
    let mut order: Vec<&SupportVector<'_>> = vectors.iter().collect();
    order.sort_by_key(|v| v.id);
    let first = order.first().ok_or(Error::EmptyClass(class))?;
    let mut sum = first.vector.to_vec();
    for v in &order[1..] {
        if v.vector.len() != sum.len() {
            return Err(shape_err!("support embeddings of class {class} disagree on D"));
        }
        sum.iter_mut().zip(v.vector).for_each(|(a, b)| *a += b);
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

/// One prototype per class: the mean of that class's support embeddings.
pub fn compute_prototypes(classes: &[Vec<SupportVector<'_>>]) -> Result<Vec<ClassRepresentation>> {
    classes
        .iter()
        .enumerate()
        .map(|(class, vectors)| {
            Ok(ClassRepresentation {
                class,
                vector: ordered_mean(class, vectors)?,
                kind: RepKind::Prototype,
            })
        })
        .collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_reps(query: &[f64], reps: &[ClassRepresentation]) -> Result<()> {
    if reps.is_empty() {
        return Err(shape_err!("no class representations"));
    }
    if let Some(r) = reps.iter().find(|r| r.vector.len() != query.len()) {
        return Err(shape_err!(
            "representation of class {} has {} dims, query has {}",
            r.class,
            r.vector.len(),
            query.len()
        ));
    }
    Ok(())
}

/// Index (into `reps`) of the nearest representation in squared Euclidean
/// distance; ties go to the lowest index.
pub fn classify(query: &[f64], reps: &[ClassRepresentation]) -> Result<usize> {
    check_reps(query, reps)?;
    let mut best = (0, f64::INFINITY);
    for (k, r) in reps.iter().enumerate() {
        let d = squared_distance(query, &r.vector);
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// `-‖query - rep_k‖² / T` for every representation.
pub fn logits(query: &[f64], reps: &[ClassRepresentation], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    check_reps(query, reps)?;
    Ok(reps
        .iter()
        .map(|r| -squared_distance(query, &r.vector) / temperature)
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[true_class]`, evaluated with log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f64], true_class: usize) -> Result<f64> {
    let target = *logits.get(true_class).ok_or(Error::Index {
        index: true_class,
        len: logits.len(),
    })?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - target)
}

/// A query embedding with its episode label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledQuery<'a> {
    pub embedding: &'a [f64],
    pub class: usize,
}

fn mean_cross_entropy(queries: &[LabeledQuery<'_>], reps: &[ClassRepresentation], temperature: f64) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InsufficientData("no queries".into()));
    }
    let mut total = 0.0;
    for q in queries {
        total += cross_entropy_from_logits(&logits(q.embedding, reps, temperature)?, q.class)?;
    }
    Ok(total / queries.len() as f64)
}

/// Mean query cross-entropy against the prototypes.
pub fn loss_base(queries: &[LabeledQuery<'_>], prototypes: &[ClassRepresentation], temperature: f64) -> Result<f64> {
    mean_cross_entropy(queries, prototypes, temperature)
}

/// Mean query cross-entropy against the refined representations.
pub fn loss_roi(queries: &[LabeledQuery<'_>], refined: &[ClassRepresentation], temperature: f64) -> Result<f64> {
    mean_cross_entropy(queries, refined, temperature)
}

pub fn loss_ours(base: f64, roi: f64, lambda_roi: f64) -> Result<f64> {
    if !(lambda_roi >= 0.0) {
        return Err(Error::NegativeLambda(lambda_roi));
    }
    Ok(base + lambda_roi * roi)
}

/// Everything the episode loss needs besides parameters and data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub loss: LossConfig,
    pub localize: LocalizeConfig,
    pub roi: RoiConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLoss {
    /// The optimized loss: `L_base` in prototype mode, `L_base + λ·L_roi` in refined mode.
    pub loss: f64,
    pub base: f64,
    pub roi: Option<f64>,
    /// Support boxes, in support order (refined mode only).
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeGradient {
    pub loss: EpisodeLoss,
    pub grad: Vec<f64>,
}

/// Gradient of `sum_q CE(logits(e_q, reps), y_q) / M` with respect to the
/// query embeddings and the representations, scaled by `weight`.
fn accumulate_ce_grads(
    queries: &[Vec<f64>],
    labels: &[usize],
    reps: &[ClassRepresentation],
    temperature: f64,
    weight: f64,
    grad_queries: &mut [Vec<f64>],
    grad_reps: &mut [Vec<f64>],
) -> Result<f64> {
    let m = queries.len() as f64;
    let mut total = 0.0;
    for ((e, &y), gq) in queries.iter().zip(labels).zip(grad_queries.iter_mut()) {
        let l = logits(e, reps, temperature)?;
        total += cross_entropy_from_logits(&l, y)?;
        let probs = softmax(&l);
        for (k, (rep, gr)) in reps.iter().zip(grad_reps.iter_mut()).enumerate() {
            let dl = weight * (probs[k] - if k == y { 1.0 } else { 0.0 }) / m;
            if dl == 0.0 {
                continue;
            }
            let coef = 2.0 * dl / temperature;
            for ((gqd, grd), (ev, rv)) in gq.iter_mut().zip(gr.iter_mut()).zip(e.iter().zip(&rep.vector)) {
                let diff = ev - rv;
                *gqd -= coef * diff;
                *grd += coef * diff;
            }
        }
    }
    Ok(total / m)
}

struct Forwarded {
    fms: Vec<Tensor>,
    caches: Vec<encoder::ForwardCache>,
    embeddings: Vec<Vec<f64>>,
}

fn forward_all(params: &EncoderParams, items: &[&EpisodeItem]) -> Result<Forwarded> {
    let outs: Vec<(Tensor, encoder::ForwardCache)> = items
        .par_iter()
        .map(|it| encoder::forward(params, &it.image))
        .collect::<Result<_>>()?;
    let mut fw = Forwarded {
        fms: Vec::with_capacity(outs.len()),
        caches: Vec::with_capacity(outs.len()),
        embeddings: Vec::with_capacity(outs.len()),
    };
    for (fm, cache) in outs {
        fw.embeddings.push(ops::global_avg_pool(&fm)?);
        fw.fms.push(fm);
        fw.caches.push(cache);
    }
    Ok(fw)
}

/// Support indices grouped by class.
fn support_groups(episode: &Episode) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); episode.n_way];
    for (i, s) in episode.support.iter().enumerate() {
        groups[s.class].push(i);
    }
    groups
}

fn prototypes_of(episode: &Episode, groups: &[Vec<usize>], embeddings: &[Vec<f64>]) -> Result<Vec<ClassRepresentation>> {
    let classes: Vec<Vec<SupportVector<'_>>> = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|&i| SupportVector {
                    id: episode.support[i].id,
                    vector: &embeddings[i],
                })
                .collect()
        })
        .collect();
    compute_prototypes(&classes)
}

/// Proposes a box on every support feature map from its class prototype.
pub fn propose_support_boxes(
    episode: &Episode,
    support_fms: &[Tensor],
    prototypes: &[ClassRepresentation],
    localize: LocalizeConfig,
) -> Result<Vec<BoundingBox>> {
    let (h, w) = episode.image_extents();
    episode
        .support
        .iter()
        .zip(support_fms)
        .map(|(s, fm)| localization::propose_box_with(fm, &prototypes[s.class].vector, localize, h, w))
        .collect()
}

/// Loss of one episode. In refined mode the support boxes are proposed from
/// the prototypes unless `frozen_boxes` supplies them.
pub fn episode_loss(
    params: &EncoderParams,
    episode: &Episode,
    mode: RepMode,
    cfg: &EpisodeConfig,
    frozen_boxes: Option<&[BoundingBox]>,
) -> Result<EpisodeLoss> {
    Ok(episode_pass(params, episode, mode, cfg, frozen_boxes, false)?.loss)
}

/// Loss and parameter gradient of one episode.
///
/// Gradients flow into query embeddings, into support embeddings through
/// the prototype mean, and (refined mode) into support feature maps through
/// the RoIAlign sampling weights. Box coordinates are constants.
pub fn episode_gradient(
    params: &EncoderParams,
    episode: &Episode,
    mode: RepMode,
    cfg: &EpisodeConfig,
) -> Result<EpisodeGradient> {
    episode_pass(params, episode, mode, cfg, None, true)
}

fn episode_pass(
    params: &EncoderParams,
    episode: &Episode,
    mode: RepMode,
    cfg: &EpisodeConfig,
    frozen_boxes: Option<&[BoundingBox]>,
    with_grad: bool,
) -> Result<EpisodeGradient> {
    episode.validate()?;
    if !(cfg.loss.lambda_roi >= 0.0) {
        return Err(Error::NegativeLambda(cfg.loss.lambda_roi));
    }
    let n_support = episode.support.len();
    let items: Vec<&EpisodeItem> = episode.support.iter().chain(&episode.queries).collect();
    let fw = forward_all(params, &items)?;
    let (support_emb, query_emb) = fw.embeddings.split_at(n_support);
    let labels: Vec<usize> = episode.queries.iter().map(|q| q.class).collect();
    let groups = support_groups(episode);
    let prototypes = prototypes_of(episode, &groups, support_emb)?;
    let d = prototypes[0].vector.len();
    let temperature = cfg.loss.temperature;

    let mut g_query = vec![vec![0.0; d]; query_emb.len()];
    let mut g_proto = vec![vec![0.0; d]; episode.n_way];
    let base = accumulate_ce_grads(query_emb, &labels, &prototypes, temperature, 1.0, &mut g_query, &mut g_proto)?;

    let mut roi_loss = None;
    let mut boxes = Vec::new();
    let mut g_support_fm: Vec<Option<Tensor>> = vec![None; n_support];
    if mode == RepMode::Refined {
        let (h, w) = episode.image_extents();
        boxes = match frozen_boxes {
            Some(b) if b.len() == n_support => b.to_vec(),
            Some(b) => return Err(shape_err!("{} frozen boxes for {n_support} supports", b.len())),
            None => propose_support_boxes(episode, &fw.fms[..n_support], &prototypes, cfg.localize)?,
        };
        let mut feats = Vec::with_capacity(n_support);
        let mut plans = Vec::with_capacity(n_support);
        for (fm, b) in fw.fms[..n_support].iter().zip(&boxes) {
            let (f, plan) = roi::roi_feature_cached(fm, b, (h, w), cfg.roi)?;
            feats.push(f);
            plans.push(plan);
        }
        let refined: Vec<ClassRepresentation> = prototypes_of(episode, &groups, &feats)?
            .into_iter()
            .map(|r| ClassRepresentation {
                kind: RepKind::Refined,
                ..r
            })
            .collect();
        let lambda = cfg.loss.lambda_roi;
        let mut g_refined = vec![vec![0.0; d]; episode.n_way];
        let roi_value = if lambda == 0.0 {
            mean_cross_entropy(&labeled(query_emb, &labels), &refined, temperature)?
        } else {
            accumulate_ce_grads(query_emb, &labels, &refined, temperature, lambda, &mut g_query, &mut g_refined)?
        };
        roi_loss = Some(roi_value);
        if with_grad && lambda != 0.0 {
            for (i, s) in episode.support.iter().enumerate() {
                let k = groups[s.class].len() as f64;
                let g: Vec<f64> = g_refined[s.class].iter().map(|v| v / k).collect();
                g_support_fm[i] = Some(roi::roi_feature_vjp(&plans[i], &g)?);
            }
        }
    }

    let loss = match roi_loss {
        Some(r) => loss_ours(base, r, cfg.loss.lambda_roi)?,
        None => base,
    };
    let loss = EpisodeLoss {
        loss,
        base,
        roi: roi_loss,
        boxes,
    };
    if !with_grad {
        return Ok(EpisodeGradient { loss, grad: Vec::new() });
    }

    // Embedding gradients per image, supports first.
    let mut g_emb: Vec<Vec<f64>> = Vec::with_capacity(items.len());
    for s in &episode.support {
        let k = groups[s.class].len() as f64;
        g_emb.push(g_proto[s.class].iter().map(|v| v / k).collect());
    }
    g_emb.extend(g_query);

    let fm_h = fw.fms[0].shape()[0];
    let fm_w = fw.fms[0].shape()[1];
    let per_image: Vec<Vec<f64>> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let mut g_fm = ops::gap_vjp(fm_h, fm_w, &g_emb[i]);
            if let Some(Some(extra)) = g_support_fm.get(i) {
                g_fm.data_mut().iter_mut().zip(extra.data()).for_each(|(a, b)| *a += b);
            }
            encoder::backward(params, &fw.caches[i], &g_fm)
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    for g in &per_image {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(EpisodeGradient { loss, grad })
}

fn labeled<'a>(embeddings: &'a [Vec<f64>], labels: &[usize]) -> Vec<LabeledQuery<'a>> {
    embeddings
        .iter()
        .zip(labels)
        .map(|(e, &class)| LabeledQuery { embedding: e, class })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderArch;
    use crate::testutil::{central_diff, norm_rel_err, random_nonneg, random_tensor, rng};
    use proptest::prelude::*;

    fn reps(vectors: &[&[f64]]) -> Vec<ClassRepresentation> {
        vectors
            .iter()
            .enumerate()
            .map(|(class, v)| ClassRepresentation {
                class,
                vector: v.to_vec(),
                kind: RepKind::Prototype,
            })
            .collect()
    }

    #[test]
    fn prototype_cases() {
        let one = compute_prototypes(&[vec![SupportVector { id: 3, vector: &[1.5, -2.0] }]]).unwrap();
        assert_eq!(one[0].vector, vec![1.5, -2.0]);
        assert_eq!(one[0].kind, RepKind::Prototype);

        let two = compute_prototypes(&[vec![
            SupportVector { id: 0, vector: &[1.0, 3.0] },
            SupportVector { id: 1, vector: &[3.0, 1.0] },
        ]])
        .unwrap();
        assert_eq!(two[0].vector, vec![2.0, 2.0]);

        assert!(matches!(compute_prototypes(&[vec![], vec![]]), Err(Error::EmptyClass(0))));
    }

    #[test]
    fn prototype_permutation_is_bit_identical() {
        let mut r = rng(1);
        let vecs: Vec<Vec<f64>> = (0..7).map(|_| random_tensor(&mut r, &[9]).into_data()).collect();
        let items: Vec<SupportVector<'_>> = vecs.iter().enumerate().map(|(id, v)| SupportVector { id: id * 3 + 1, vector: v }).collect();
        let a = compute_prototypes(&[items.clone()]).unwrap();
        let mut shuffled = items;
        shuffled.reverse();
        shuffled.swap(1, 4);
        let b = compute_prototypes(&[shuffled]).unwrap();
        assert!(a[0].vector.iter().zip(&b[0].vector).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn classify_cases() {
        let rs = reps(&[&[0.0, 0.0], &[5.0, 5.0], &[1.0, -1.0]]);
        assert_eq!(classify(&[1.0, -1.0], &rs).unwrap(), 2);
        let tie = reps(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(classify(&[0.0, 0.0], &tie).unwrap(), 0);
        assert!(classify(&[0.0], &rs).is_err());
        assert!(classify(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn classify_matches_exhaustive_oracle() {
        let mut r = rng(2);
        for _ in 0..200 {
            let vs: Vec<Vec<f64>> = (0..5).map(|_| random_tensor(&mut r, &[4]).into_data()).collect();
            let rs = reps(&vs.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
            let q = random_tensor(&mut r, &[4]).into_data();
            let dists: Vec<f64> = vs.iter().map(|v| v.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(classify(&q, &rs).unwrap(), want);
        }
    }

    #[test]
    fn logits_cases() {
        let rs = reps(&[&[0.0, 0.0], &[8.0, 0.0]]);
        assert_eq!(logits(&[0.0, 0.0], &rs, 64.0).unwrap(), vec![0.0, -1.0]);
        let sym = reps(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let l = logits(&[0.0, 0.0], &sym, 3.0).unwrap();
        assert!(l.iter().all(|&v| v == l[0]));
        assert!(matches!(logits(&[0.0, 0.0], &rs, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(logits(&[0.0, 0.0], &rs, -1.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy_from_logits(&[0.3; 5], 2).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
        let ce = cross_entropy_from_logits(&[0.0, -1.0], 0).unwrap();
        assert!((ce - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((ce - 0.31326).abs() < 1e-5);
        assert!(matches!(cross_entropy_from_logits(&[0.0], 1), Err(Error::Index { .. })));
    }

    #[test]
    fn loss_cases() {
        let rs = reps(&[&[0.0, 0.0], &[80.0, 0.0]]);
        let q = [0.0, 0.0];
        let l = loss_base(&[LabeledQuery { embedding: &q, class: 0 }], &rs, 64.0).unwrap();
        assert!(l <= 1e-12);

        let same = reps(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let qs = [[0.0, 2.0], [5.0, -1.0]];
        let lq: Vec<_> = qs.iter().enumerate().map(|(i, e)| LabeledQuery { embedding: e, class: i }).collect();
        assert!((loss_base(&lq, &same, 64.0).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(
            loss_roi(&lq, &same, 64.0).unwrap().to_bits(),
            loss_base(&lq, &same, 64.0).unwrap().to_bits()
        );

        assert_eq!(loss_ours(0.7, 0.3, 0.0).unwrap(), 0.7);
        assert_eq!(loss_ours(0.7, 0.7, 1.0).unwrap(), 1.4);
        assert!((loss_ours(1.0, 0.4, 0.5).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(loss_ours(1.0, 1.0, -0.1), Err(Error::NegativeLambda(_))));
    }

    #[test]
    fn loss_matches_direct_oracle() {
        let mut r = rng(3);
        let vs: Vec<Vec<f64>> = (0..4).map(|_| random_tensor(&mut r, &[6]).into_data()).collect();
        let rs = reps(&vs.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
        let qs: Vec<Vec<f64>> = (0..8).map(|_| random_tensor(&mut r, &[6]).into_data()).collect();
        let lq: Vec<_> = qs.iter().enumerate().map(|(i, e)| LabeledQuery { embedding: e, class: i % 4 }).collect();
        let t = 0.7;
        let mut total = 0.0;
        for (i, q) in qs.iter().enumerate() {
            let ex: Vec<f64> = vs
                .iter()
                .map(|v| (-v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t).exp())
                .collect();
            total += -(ex[i % 4] / ex.iter().sum::<f64>()).ln();
        }
        assert!((loss_base(&lq, &rs, t).unwrap() - total / 8.0).abs() < 1e-12);
        assert!((loss_roi(&lq, &rs, t).unwrap() - total / 8.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(l in proptest::collection::vec(-500.0f64..500.0, 1..12)) {
            let p = softmax(&l);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn classify_invariant_to_temperature_and_monotone_maps(
            vs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..6),
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            t1 in 0.01f64..100.0,
            t2 in 0.01f64..100.0,
        ) {
            let rs = reps(&vs.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
            let argmax = |l: &[f64]| {
                let mut best = 0;
                for (i, &v) in l.iter().enumerate() {
                    if v > l[best] { best = i; }
                }
                best
            };
            let c = classify(&q, &rs).unwrap();
            // Ordering of tied distances can differ after division, so only
            // compare when the minimum is unique.
            let d: Vec<f64> = rs.iter().map(|r| squared_distance(&q, &r.vector)).collect();
            let unique = d.iter().filter(|&&x| x <= d[c] * (1.0 + 1e-9)).count() == 1;
            if unique {
                prop_assert_eq!(argmax(&logits(&q, &rs, t1).unwrap()), c);
                prop_assert_eq!(argmax(&logits(&q, &rs, t2).unwrap()), c);
                let transformed: Vec<f64> = d.iter().map(|x| -(x.sqrt() * 3.0 + 1.0).exp()).collect();
                prop_assert_eq!(argmax(&transformed), c);
            }
        }

        #[test]
        fn loss_base_nonnegative(
            vs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 2..5),
            q in proptest::collection::vec(-3.0f64..3.0, 2),
            t in 0.1f64..100.0,
        ) {
            let rs = reps(&vs.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
            let l = loss_base(&[LabeledQuery { embedding: &q, class: 0 }], &rs, t).unwrap();
            prop_assert!(l >= 0.0);
        }
    }

    pub(crate) fn small_arch() -> EncoderArch {
        EncoderArch {
            blocks: 2,
            channels: vec![4, 6],
            kernel: 3,
            input_size: 16,
            input_channels: 3,
        }
    }

    fn random_episode(seed: u64, n_way: usize, k_shot: usize, q: usize) -> Episode {
        let mut r = rng(seed);
        let mut id = 0;
        let mut make = |class: usize| {
            id += 1;
            EpisodeItem {
                id,
                image: random_nonneg(&mut r, &[16, 16, 3]),
                class,
                gt_box: BoundingBox::full(16, 16),
            }
        };
        let support = (0..n_way).flat_map(|c| (0..k_shot).map(move |_| c)).collect::<Vec<_>>();
        let support: Vec<EpisodeItem> = support.into_iter().map(&mut make).collect();
        let queries = (0..n_way).flat_map(|c| (0..q).map(move |_| c)).collect::<Vec<_>>();
        let queries: Vec<EpisodeItem> = queries.into_iter().map(&mut make).collect();
        Episode {
            n_way,
            k_shot,
            queries_per_class: q,
            support,
            queries,
            split: "test".into(),
        }
    }

    fn cfg(t: f64, lambda: f64) -> EpisodeConfig {
        EpisodeConfig {
            loss: LossConfig { temperature: t, lambda_roi: lambda },
            localize: LocalizeConfig::with_tau(0.5),
            roi: RoiConfig::default(),
        }
    }

    #[test]
    fn episode_validation() {
        let mut ep = random_episode(1, 2, 1, 1);
        assert!(ep.validate().is_ok());
        ep.support[0].class = 1;
        assert!(ep.validate().is_err());
        let mut ep = random_episode(1, 2, 1, 1);
        ep.queries.pop();
        assert!(ep.validate().is_err());
    }

    #[test]
    fn prototype_gradient_matches_finite_differences() {
        let arch = small_arch();
        let params = EncoderParams::init(&arch, 5).unwrap();
        let ep = random_episode(6, 3, 2, 2);
        let c = cfg(0.05, 0.0);
        let g = episode_gradient(&params, &ep, RepMode::Prototype, &c).unwrap();
        let fd = central_diff(params.values(), |v| {
            let p = EncoderParams::from_values(&arch, v.to_vec()).unwrap();
            episode_loss(&p, &ep, RepMode::Prototype, &c, None).unwrap().loss
        });
        let err = norm_rel_err(&g.grad, &fd);
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn refined_gradient_matches_finite_differences_with_frozen_boxes() {
        let arch = small_arch();
        let params = EncoderParams::init(&arch, 7).unwrap();
        let ep = random_episode(8, 2, 2, 2);
        let c = cfg(0.05, 0.7);
        let g = episode_gradient(&params, &ep, RepMode::Refined, &c).unwrap();
        assert_eq!(g.loss.boxes.len(), 4);
        let boxes = g.loss.boxes.clone();
        let fd = central_diff(params.values(), |v| {
            let p = EncoderParams::from_values(&arch, v.to_vec()).unwrap();
            episode_loss(&p, &ep, RepMode::Refined, &c, Some(&boxes)).unwrap().loss
        });
        let err = norm_rel_err(&g.grad, &fd);
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn zero_lambda_refined_equals_prototype() {
        let params = EncoderParams::init(&small_arch(), 9).unwrap();
        let ep = random_episode(10, 3, 1, 2);
        let c = cfg(64.0, 0.0);
        let a = episode_gradient(&params, &ep, RepMode::Prototype, &c).unwrap();
        let b = episode_gradient(&params, &ep, RepMode::Refined, &c).unwrap();
        assert_eq!(a.loss.loss.to_bits(), b.loss.loss.to_bits());
        assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gradient_vanishes_at_separated_minimum() {
        // Every image of class c is identical, so queries sit exactly on
        // their prototypes, and classes are far apart relative to T.
        let arch = small_arch();
        let params = EncoderParams::init(&arch, 11).unwrap();
        let n_way = 3;
        let mut images = Vec::new();
        let mut r = rng(12);
        let t = 1e-4;
        loop {
            images.clear();
            for _ in 0..n_way {
                images.push(random_nonneg(&mut r, &[16, 16, 3]));
            }
            let embs: Vec<Vec<f64>> = images.iter().map(|im| encoder::embed(&params, im).unwrap()).collect();
            let min_gap = (0..n_way)
                .flat_map(|a| (0..n_way).filter(move |&b| b != a).map(move |b| (a, b)))
                .map(|(a, b)| squared_distance(&embs[a], &embs[b]))
                .fold(f64::INFINITY, f64::min);
            if min_gap / t >= 60.0 {
                break;
            }
        }
        let mut id = 0;
        let mut item = |class: usize| {
            id += 1;
            EpisodeItem { id, image: images[class].clone(), class, gt_box: BoundingBox::full(16, 16) }
        };
        let support: Vec<_> = (0..n_way).flat_map(|c| [c, c]).map(&mut item).collect();
        let queries: Vec<_> = (0..n_way).flat_map(|c| [c, c, c]).map(&mut item).collect();
        let ep = Episode { n_way, k_shot: 2, queries_per_class: 3, support, queries, split: "train".into() };
        let g = episode_gradient(&params, &ep, RepMode::Prototype, &cfg(t, 0.0)).unwrap();
        let norm = g.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "gradient norm {norm}");
        assert!(g.loss.loss <= 1e-12);
    }

    #[test]
    fn gradient_is_deterministic() {
        let params = EncoderParams::init(&small_arch(), 13).unwrap();
        let ep = random_episode(14, 2, 2, 3);
        let c = cfg(1.0, 0.5);
        let a = episode_gradient(&params, &ep, RepMode::Refined, &c).unwrap();
        let b = episode_gradient(&params, &ep, RepMode::Refined, &c).unwrap();
        assert_eq!(a, b);
    }
}

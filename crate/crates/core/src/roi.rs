//! RoIAlign pooling of feature maps inside image-space boxes, and the
//! refined class representation built from it.
//!
//! An inclusive pixel box `[y0, y1] × [x0, x1]` is treated as the continuous
//! region `[y0, y1 + 1) × [x0, x1 + 1)`, scaled into feature coordinates by
//! `h/H` and `w/W` without rounding, split into `grid × grid` bins, and each
//! bin is the mean of `samples × samples` bilinear samples at regular
//! sub-bin centers. Feature cell `(i, j)` has its center at continuous
//! coordinate `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::episodic::{ClassRepresentation, RepKind};
use crate::error::{shape_err, Error, Result};
use crate::localization::BoundingBox;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Output bins per axis.
    pub grid: usize,
    /// Sample points per bin axis.
    pub samples: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { grid: 3, samples: 2 }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.samples == 0 {
            return Err(Error::Config(format!(
                "roi grid and samples must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sample coordinates along one axis, in the cell-index convention used by
/// [`ops::bilinear_sample`].
fn axis_samples(lo: usize, hi_inclusive: usize, extent: usize, image_extent: usize, cfg: &RoiConfig) -> Vec<f64> {
    let scale = extent as f64 / image_extent as f64;
    let start = lo as f64 * scale;
    let end = (hi_inclusive + 1) as f64 * scale;
    let bin = (end - start) / cfg.grid as f64;
    let mut coords = Vec::with_capacity(cfg.grid * cfg.samples);
    for b in 0..cfg.grid {
        for s in 0..cfg.samples {
            let offset = b as f64 + (s as f64 + 0.5) / cfg.samples as f64;
            coords.push(start + bin * offset - 0.5);
        }
    }
    coords
}

/// Sample weights for one box on one feature-map geometry. Serves as the
/// forward plan and as the cache for [`roi_align_vjp`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPlan {
    fm_shape: [usize; 3],
    cfg: RoiConfig,
    /// Per bin, `(cell index, weight)` pairs; each bin's weights sum to one.
    bins: Vec<Vec<(usize, f64)>>,
}

impl RoiPlan {
    pub fn new(fm_shape: &[usize], bbox: &BoundingBox, image_extents: (usize, usize), cfg: RoiConfig) -> Result<Self> {
        cfg.validate()?;
        let [h, w, d] = fm_shape[..] else {
            return Err(shape_err!("feature map must be 3-D, got {fm_shape:?}"));
        };
        let (img_h, img_w) = image_extents;
        bbox.validate(img_h, img_w)?;
        let ys = axis_samples(bbox.y0, bbox.y1, h, img_h, &cfg);
        let xs = axis_samples(bbox.x0, bbox.x1, w, img_w, &cfg);
        let (g, s) = (cfg.grid, cfg.samples);
        let norm = 1.0 / (s * s) as f64;
        let mut bins = Vec::with_capacity(g * g);
        for by in 0..g {
            for bx in 0..g {
                let mut weights = Vec::with_capacity(4 * s * s);
                for &y in &ys[by * s..(by + 1) * s] {
                    for &x in &xs[bx * s..(bx + 1) * s] {
                        for (cell, wt) in ops::sample_weights(h, w, y, x) {
                            weights.push((cell, wt * norm));
                        }
                    }
                }
                bins.push(weights);
            }
        }
        Ok(Self {
            fm_shape: [h, w, d],
            cfg,
            bins,
        })
    }

    pub fn config(&self) -> RoiConfig {
        self.cfg
    }

    /// Applies the plan to a feature map, giving `grid×grid×D`.
    pub fn apply(&self, fm: &Tensor) -> Result<Tensor> {
        if fm.shape() != self.fm_shape {
            return Err(Error::CacheMismatch(format!(
                "plan built for {:?}, applied to {:?}",
                self.fm_shape,
                fm.shape()
            )));
        }
        let d = self.fm_shape[2];
        let src = fm.data();
        let mut out = vec![0.0; self.bins.len() * d];
        for (bin, weights) in out.chunks_exact_mut(d).zip(&self.bins) {
            for &(cell, wt) in weights {
                for (acc, &v) in bin.iter_mut().zip(&src[cell * d..][..d]) {
                    *acc += wt * v;
                }
            }
        }
        let g = self.cfg.grid;
        Ok(Tensor::from_parts(vec![g, g, d], out))
    }
}

/// RoIAlign of `fm` inside `bbox`, where the box is given in `image_extents`
/// pixel coordinates.
pub fn roi_align(fm: &Tensor, bbox: &BoundingBox, image_extents: (usize, usize), cfg: RoiConfig) -> Result<Tensor> {
    RoiPlan::new(fm.shape(), bbox, image_extents, cfg)?.apply(fm)
}

/// [`roi_align`] that also returns its plan for the backward pass.
pub fn roi_align_cached(
    fm: &Tensor,
    bbox: &BoundingBox,
    image_extents: (usize, usize),
    cfg: RoiConfig,
) -> Result<(Tensor, RoiPlan)> {
    let plan = RoiPlan::new(fm.shape(), bbox, image_extents, cfg)?;
    let out = plan.apply(fm)?;
    Ok((out, plan))
}

/// Gradient with respect to the feature map. The box is a constant: its
/// coordinates receive no gradient.
pub fn roi_align_vjp(plan: &RoiPlan, grad_output: &Tensor) -> Result<Tensor> {
    let g = plan.cfg.grid;
    let d = plan.fm_shape[2];
    if grad_output.shape() != [g, g, d] {
        return Err(Error::CacheMismatch(format!(
            "grad_output {:?} does not match {g}x{g}x{d} bins",
            grad_output.shape()
        )));
    }
    let mut grad = vec![0.0; plan.fm_shape.iter().product()];
    for (go, weights) in grad_output.data().chunks_exact(d).zip(&plan.bins) {
        for &(cell, wt) in weights {
            for (acc, &gv) in grad[cell * d..][..d].iter_mut().zip(go) {
                *acc += wt * gv;
            }
        }
    }
    Ok(Tensor::from_parts(plan.fm_shape.to_vec(), grad))
}

fn mean_of_bins(bins: &Tensor) -> Vec<f64> {
    let d = bins.shape()[2];
    let n = bins.len() / d;
    let mut out = vec![0.0; d];
    for bin in bins.data().chunks_exact(d) {
        for (acc, &v) in out.iter_mut().zip(bin) {
            *acc += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Region feature vector: mean over the RoIAlign bins.
pub fn roi_feature(fm: &Tensor, bbox: &BoundingBox, image_extents: (usize, usize), cfg: RoiConfig) -> Result<Vec<f64>> {
    Ok(mean_of_bins(&roi_align(fm, bbox, image_extents, cfg)?))
}

pub fn roi_feature_cached(
    fm: &Tensor,
    bbox: &BoundingBox,
    image_extents: (usize, usize),
    cfg: RoiConfig,
) -> Result<(Vec<f64>, RoiPlan)> {
    let (bins, plan) = roi_align_cached(fm, bbox, image_extents, cfg)?;
    Ok((mean_of_bins(&bins), plan))
}

/// Adjoint of [`roi_feature`] with respect to the feature map.
pub fn roi_feature_vjp(plan: &RoiPlan, g: &[f64]) -> Result<Tensor> {
    let grid = plan.cfg.grid;
    let n = (grid * grid) as f64;
    let scaled: Vec<f64> = g.iter().map(|v| v / n).collect();
    let mut data = Vec::with_capacity(grid * grid * g.len());
    for _ in 0..grid * grid {
        data.extend_from_slice(&scaled);
    }
    roi_align_vjp(plan, &Tensor::from_parts(vec![grid, grid, g.len()], data))
}

/// One support item of a class: its feature map and proposed box.
#[derive(Clone, Copy, Debug)]
pub struct RoiItem<'a> {
    pub id: usize,
    pub fm: &'a Tensor,
    pub bbox: BoundingBox,
}

/// Refined representation: mean of the items' RoI features, summed in
/// ascending `id` order.
pub fn refine_representation(
    class: usize,
    items: &[RoiItem<'_>],
    image_extents: (usize, usize),
    cfg: RoiConfig,
) -> Result<ClassRepresentation> {
    if items.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    let mut order: Vec<&RoiItem<'_>> = items.iter().collect();
    order.sort_by_key(|it| it.id);
    let mut sum: Option<Vec<f64>> = None;
    for it in order {
        let f = roi_feature(it.fm, &it.bbox, image_extents, cfg)?;
        match sum.as_mut() {
            None => sum = Some(f),
            Some(acc) => {
                if acc.len() != f.len() {
                    return Err(shape_err!("support feature maps disagree on D"));
                }
                acc.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            }
        }
    }
    let n = items.len() as f64;
    let vector = sum.unwrap().into_iter().map(|v| v / n).collect();
    Ok(ClassRepresentation {
        class,
        vector,
        kind: RepKind::Refined,
    })
}

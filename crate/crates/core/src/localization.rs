//! Weakly supervised object localization from a class representation.
//!
//! A representation is normalized and dotted with every feature-map cell,
//! the resulting similarity map is upsampled to image resolution, thresholded
//! relative to its maximum, and the largest connected foreground region is
//! boxed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Representations with a norm at or below this cannot be normalized.
pub const MIN_REP_NORM: f64 = 1e-12;

/// Inclusive pixel rectangle `[y0, y1] × [x0, x1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        debug_assert!(y0 <= y1 && x0 <= x1);
        Self { y0, x0, y1, x1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height - 1, width - 1)
    }

    /// Checks the box against `height × width` image extents.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.y0 > self.y1 || self.x0 > self.x1 || self.y1 >= height || self.x1 >= width {
            return Err(shape_err!("box {self:?} is not inside a {height}x{width} image"));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    /// Intersection over union, counting pixels.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let y0 = self.y0.max(other.y0);
        let x0 = self.x0.max(other.x0);
        let y1 = self.y1.min(other.y1);
        let x1 = self.x1.min(other.x1);
        let inter = if y0 <= y1 && x0 <= x1 {
            (y1 - y0 + 1) * (x1 - x0 + 1)
        } else {
            0
        };
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Up, down, left and right neighbors.
    #[default]
    Four,
    /// All eight surrounding pixels.
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Dot product of the unit-normalized representation with every cell of an
/// `h×w×D` feature map, giving an `h×w` map.
pub fn similarity_map(fm: &Tensor, rep: &[f64]) -> Result<Tensor> {
    let (h, w, d) = fm.dims3()?;
    if rep.len() != d {
        return Err(shape_err!("representation has {} dims, feature map has {d}", rep.len()));
    }
    let norm = rep.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= MIN_REP_NORM {
        return Err(Error::DegenerateRepresentation(norm));
    }
    let unit: Vec<f64> = rep.iter().map(|v| v / norm).collect();
    let values = fm
        .data()
        .chunks_exact(d)
        .map(|cell| cell.iter().zip(&unit).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_parts(vec![h, w], values))
}

/// Marks pixels whose value is at least `tau` times the map maximum.
pub fn segment_mask(map: &Tensor, tau: f64) -> Result<BinaryMask> {
    let (h, w) = map.dims2()?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(Error::DegenerateMap(max));
    }
    let cut = tau * max;
    Ok(BinaryMask::from_fn(h, w, |y, x| map.at2(y, x) >= cut))
}

/// Pixels of the largest connected foreground component, in row-major order.
///
/// Equal-size components resolve to the one reached first in a row-major scan.
pub fn largest_component(mask: &BinaryMask, connectivity: Connectivity) -> Result<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let (y, x) = ((idx / w) as isize, (idx % w) as isize);
            for &(dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if mask.bits[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyMask);
    }
    best.sort_unstable();
    Ok(best.into_iter().map(|i| (i / w, i % w)).collect())
}

/// Tightest box covering every pixel of the component.
pub fn bbox_of(component: &[(usize, usize)]) -> Result<BoundingBox> {
    let (&(y, x), rest) = component.split_first().ok_or(Error::EmptyComponent)?;
    Ok(rest.iter().fold(BoundingBox::new(y, x, y, x), |b, &(y, x)| BoundingBox {
        y0: b.y0.min(y),
        x0: b.x0.min(x),
        y1: b.y1.max(y),
        x1: b.x1.max(x),
    }))
}

/// Relative threshold and pixel connectivity used for box proposals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub tau: f64,
    pub connectivity: Connectivity,
}

impl LocalizeConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            connectivity: Connectivity::Four,
        }
    }
}

/// Box around the image region most aligned with `rep`, with 4-connectivity.
///
/// Falls back to the full image when the similarity map has no positive value.
pub fn propose_box(fm: &Tensor, rep: &[f64], tau: f64, height: usize, width: usize) -> Result<BoundingBox> {
    propose_box_with(fm, rep, LocalizeConfig::with_tau(tau), height, width)
}

pub fn propose_box_with(
    fm: &Tensor,
    rep: &[f64],
    cfg: LocalizeConfig,
    height: usize,
    width: usize,
) -> Result<BoundingBox> {
    let sm = similarity_map(fm, rep)?;
    let upsampled = ops::bilinear_resize(&sm, height, width)?;
    match segment_mask(&upsampled, cfg.tau) {
        Ok(mask) => bbox_of(&largest_component(&mask, cfg.connectivity)?),
        Err(Error::DegenerateMap(_)) => Ok(BoundingBox::full(height, width)),
        Err(e) => Err(e),
    }
}

/// Localizes the predicted class in a query image using that class's
/// representation. Same contract as [`propose_box_with`].
pub fn localize_query(
    query_fm: &Tensor,
    predicted_rep: &[f64],
    cfg: LocalizeConfig,
    height: usize,
    width: usize,
) -> Result<BoundingBox> {
    propose_box_with(query_fm, predicted_rep, cfg, height, width)
}

//! Synthetic "shapes with distractors" dataset with exact object boxes, its
//! on-disk layout, and the episodic sampler.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodic::{Episode, EpisodeItem};
use crate::error::{Error, Result};
use crate::localization::BoundingBox;
use crate::tensor::Tensor;
use crate::tns::{TnsData, TnsFile};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Plus,
    Diamond,
}

impl Shape {
    /// Whether offset `(dy, dx)` from the center lies in a shape of half-size `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Plus => {
                let (ay, ax) = (dy.abs(), dx.abs());
                (ay <= r && ax <= r / 3.0) || (ax <= r && ay <= r / 3.0)
            }
            Shape::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: Shape,
    /// RGB in [0,1].
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    SolidNoise,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn classes(&self, split: &str) -> Result<&[usize]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub per_class_count: usize,
    /// Range of the shape's size parameter (radius of a circle, half
    /// diagonal of a diamond) as a fraction of `image_size`.
    pub scale: (f64, f64),
    /// Inclusive range of distractors drawn per image.
    pub distractors_per_image: (usize, usize),
    /// Backgrounds to choose from, uniformly per image.
    pub backgrounds: Vec<Background>,
    pub splits: SplitSpec,
}

/// Class colors must differ from gray by at least this much in some channel
/// pair; distractors and backgrounds are exactly gray.
const MIN_CHROMA: f64 = 0.3;

pub const RED: [f64; 3] = [0.9, 0.15, 0.15];
pub const GREEN: [f64; 3] = [0.15, 0.8, 0.2];
pub const BLUE: [f64; 3] = [0.15, 0.25, 0.9];

impl Default for DatasetSpec {
    /// Twelve classes (four shapes in three colors) split 5/2/5.
    fn default() -> Self {
        let shapes = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];
        let colors = [RED, GREEN, BLUE];
        let classes = shapes
            .iter()
            .flat_map(|&shape| colors.iter().map(move |&color| ClassSpec { shape, color }))
            .collect();
        // Index = 3·shape + color.
        Self {
            image_size: 32,
            classes,
            per_class_count: 200,
            scale: (0.2, 0.45),
            distractors_per_image: (1, 3),
            backgrounds: vec![Background::SolidNoise, Background::Gradient],
            splits: SplitSpec {
                train: vec![0, 4, 8, 9, 1],
                val: vec![5, 6],
                test: vec![2, 3, 7, 10, 11],
            },
        }
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn chroma(c: &[f64; 3]) -> f64 {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = c.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} < 8", self.image_size)));
        }
        if self.per_class_count == 0 {
            return Err(Error::Config("per_class_count must be positive".into()));
        }
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 0.5) {
            return Err(Error::Config(format!("scale range {s0}..{s1} must lie in (0, 0.5]")));
        }
        let (lo, hi) = self.distractors_per_image;
        if lo > hi {
            return Err(Error::Config(format!("distractor range {lo}..{hi} is empty")));
        }
        if self.backgrounds.is_empty() {
            return Err(Error::Config("no backgrounds".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("class {i} color outside [0,1]")));
            }
            if chroma(&c.color) < MIN_CHROMA {
                return Err(Error::Config(format!(
                    "class {i} color {:?} is too close to the gray distractor family",
                    c.color
                )));
            }
        }
        let mut seen = vec![false; self.classes.len()];
        for split in SPLITS {
            for &c in self.splits.classes(split)? {
                let slot = seen.get_mut(c).ok_or(Error::Index {
                    index: c,
                    len: self.classes.len(),
                })?;
                if *slot {
                    return Err(Error::Config(format!("class {c} appears in two splits")));
                }
                *slot = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("class {missing} is in no split")));
        }
        Ok(())
    }

    /// Checks that every class holds enough samples for the episode shape.
    pub fn check_episode_capacity(&self, k_shot: usize, queries: usize) -> Result<()> {
        if self.per_class_count < k_shot + queries {
            return Err(Error::InsufficientData(format!(
                "per_class_count {} < {k_shot} shots + {queries} queries",
                self.per_class_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×3`, values in [0,1], exactly representable in f32.
    pub image: Tensor,
    pub class: usize,
    pub gt_box: BoundingBox,
}

fn paint(image: &mut [f64], size: usize, y: usize, x: usize, rgb: [f64; 3]) {
    image[(y * size + x) * 3..][..3].copy_from_slice(&rgb);
}

fn gray(level: f64) -> [f64; 3] {
    let v = quantize(level);
    [v, v, v]
}

fn draw_background(image: &mut [f64], size: usize, kind: Background, rng: &mut ChaCha8Rng) {
    match kind {
        Background::SolidNoise => {
            let base: f64 = rng.gen_range(0.3..0.7);
            for y in 0..size {
                for x in 0..size {
                    let n: f64 = rng.gen_range(-0.05..0.05);
                    paint(image, size, y, x, gray(base + n));
                }
            }
        }
        Background::Gradient => {
            let a: f64 = rng.gen_range(0.2..0.8);
            let b: f64 = rng.gen_range(0.2..0.8);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            let half = (size as f64 - 1.0) / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let t = ((y as f64 - half) * dy + (x as f64 - half) * dx) / (size as f64) + 0.5;
                    paint(image, size, y, x, gray(a + (b - a) * t.clamp(0.0, 1.0)));
                }
            }
        }
    }
}

fn draw_distractor(image: &mut [f64], size: usize, rng: &mut ChaCha8Rng) {
    let color = gray(rng.gen_range(0.1..0.9));
    let s = size as f64;
    let cy: f64 = rng.gen_range(0.0..s);
    let cx: f64 = rng.gen_range(0.0..s);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match rng.gen_range(0..3) {
        0 => {
            let len: f64 = rng.gen_range(0.12..0.3) * s;
            let thick: f64 = rng.gen_range(0.5..1.2);
            if rng.gen_bool(0.5) {
                Box::new(move |dy: f64, dx: f64| dy.abs() <= thick && dx.abs() <= len / 2.0)
            } else {
                Box::new(move |dy: f64, dx: f64| dx.abs() <= thick && dy.abs() <= len / 2.0)
            }
        }
        1 => {
            let r: f64 = rng.gen_range(1.0..2.2);
            Box::new(move |dy: f64, dx: f64| dy * dy + dx * dx <= r * r)
        }
        _ => {
            let arm: f64 = rng.gen_range(2.0..4.0);
            Box::new(move |dy: f64, dx: f64| {
                dy.abs() <= arm && dx.abs() <= arm && ((dy - dx).abs() <= 0.7 || (dy + dx).abs() <= 0.7)
            })
        }
    };
    for y in 0..size {
        for x in 0..size {
            if inside(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx) {
                paint(image, size, y, x, color);
            }
        }
    }
}

/// Renders one sample of `class_index`. The result depends only on `rng`'s state.
pub fn render_sample(spec: &DatasetSpec, class_index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let class = *spec.classes.get(class_index).ok_or(Error::Index {
        index: class_index,
        len: spec.classes.len(),
    })?;
    let size = spec.image_size;
    let s = size as f64;
    let mut image = vec![0.0; size * size * 3];
    let bg = spec.backgrounds[rng.gen_range(0..spec.backgrounds.len())];
    draw_background(&mut image, size, bg, rng);
    let (lo, hi) = spec.distractors_per_image;
    for _ in 0..rng.gen_range(lo..=hi) {
        draw_distractor(&mut image, size, rng);
    }

    let r = rng.gen_range(spec.scale.0..=spec.scale.1) * s;
    let cy: f64 = rng.gen_range(r..=s - r);
    let cx: f64 = rng.gen_range(r..=s - r);
    let color = class.color.map(quantize);
    let mut bbox: Option<BoundingBox> = None;
    for y in 0..size {
        for x in 0..size {
            if class.shape.contains(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                paint(&mut image, size, y, x, color);
                bbox = Some(match bbox {
                    None => BoundingBox::new(y, x, y, x),
                    Some(b) => BoundingBox::new(b.y0.min(y), b.x0.min(x), b.y1.max(y), b.x1.max(x)),
                });
            }
        }
    }
    // Any positive size covers the pixel nearest the center.
    let gt_box = bbox.expect("class shape covers at least one pixel");
    Ok(Sample {
        image: Tensor::from_parts(vec![size, size, 3], image),
        class: class_index,
        gt_box,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed path.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// RNG stream owned by one task; independent of how tasks are scheduled.
pub fn task_rng(master_seed: u64, task_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[master_seed, task_index]))
}

/// Samples of one split, indexed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample ids grouped by class, classes ascending.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (id, &c) in self.labels.iter().enumerate() {
            map.entry(c).or_default().push(id);
        }
        map
    }

    pub fn sample(&self, id: usize) -> Result<Sample> {
        if id >= self.len() {
            return Err(Error::UnknownId(id));
        }
        Ok(Sample {
            image: self.images[id].clone(),
            class: self.labels[id],
            gt_box: self.boxes[id],
        })
    }
}

/// Renders every sample of `split` in class-list order.
pub fn render_split(spec: &DatasetSpec, seed: u64, split: &str) -> Result<SplitData> {
    let jobs: Vec<(usize, usize)> = spec
        .splits
        .classes(split)?
        .iter()
        .flat_map(|&c| (0..spec.per_class_count).map(move |j| (c, j)))
        .collect();
    let samples: Vec<Sample> = jobs
        .par_iter()
        .map(|&(c, j)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, c as u64, j as u64]));
            render_sample(spec, c, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut data = SplitData {
        name: split.to_string(),
        images: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        boxes: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        data.images.push(s.image);
        data.labels.push(s.class);
        data.boxes.push(s.gt_box);
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    /// SHA-256 hex digests keyed by file name.
    pub digests: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitEntry>,
}

fn split_files(data: &SplitData, size: usize) -> [(&'static str, Vec<u8>); 3] {
    let n = data.len();
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    for im in &data.images {
        pixels.extend(im.data().iter().map(|&v| v as f32));
    }
    let images = TnsFile {
        shape: vec![n, size, size, 3],
        data: TnsData::F32(pixels),
    };
    let labels = TnsFile {
        shape: vec![n],
        data: TnsData::U32(data.labels.iter().map(|&l| l as u32).collect()),
    };
    let boxes = TnsFile {
        shape: vec![n, 4],
        data: TnsData::U32(
            data.boxes
                .iter()
                .flat_map(|b| [b.y0, b.x0, b.y1, b.x1].map(|v| v as u32))
                .collect(),
        ),
    };
    [
        ("images.tns", images.encode()),
        ("labels.tns", labels.encode()),
        ("boxes.tns", boxes.encode()),
    ]
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders all splits and writes `manifest.json` and `{split}/*.tns` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        let data = render_split(spec, seed, split)?;
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut digests = BTreeMap::new();
        for (name, bytes) in split_files(&data, spec.image_size) {
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            digests.insert(name.to_string(), digest(&bytes));
        }
        splits.insert(
            split.to_string(),
            SplitEntry {
                count: data.len(),
                digests,
            },
        );
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        splits,
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_verified(path: PathBuf, expected: Option<&String>) -> Result<TnsFile> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(want) = expected {
        if &digest(&bytes) != want {
            return Err(Error::format(&path, "content digest does not match manifest"));
        }
    }
    TnsFile::decode(&bytes, &path)
}

/// Loads one split, verifying file digests against the manifest.
pub fn load_split(dir: &Path, split: &str) -> Result<SplitData> {
    let manifest = load_manifest(dir)?;
    let entry = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Config(format!("split {split:?} not in manifest")))?;
    let sdir = dir.join(split);
    let file = |name: &str| read_verified(sdir.join(name), entry.digests.get(name));

    let images_path = sdir.join("images.tns");
    let images = file("images.tns")?;
    let [n, h, w, c] = images.shape[..] else {
        return Err(Error::format(&images_path, "images must be rank 4"));
    };
    let pixels = images.into_tensor()?.into_data();
    let labels = file("labels.tns")?.into_u32()?.1;
    let boxes = file("boxes.tns")?.into_u32()?.1;
    if labels.len() != n || boxes.len() != n * 4 || n != entry.count {
        return Err(Error::format(&sdir, "images, labels and boxes disagree on sample count"));
    }
    let per = h * w * c;
    Ok(SplitData {
        name: split.to_string(),
        images: pixels
            .chunks_exact(per)
            .map(|chunk| Tensor::from_parts(vec![h, w, c], chunk.to_vec()))
            .collect(),
        labels: labels.iter().map(|&l| l as usize).collect(),
        boxes: boxes
            .chunks_exact(4)
            .map(|b| BoundingBox::new(b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize))
            .collect(),
    })
}

/// Draws an `n_way`-way `k_shot`-shot episode without replacement. Classes
/// are relabeled `0..n_way` in the order they were drawn.
pub fn sample_episode(
    split: &SplitData,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || queries_per_class == 0 {
        return Err(Error::Config("n_way, k_shot and queries must be positive".into()));
    }
    let groups = split.by_class();
    if groups.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "split {} has {} classes, need {n_way}",
            split.name,
            groups.len()
        )));
    }
    let need = k_shot + queries_per_class;
    let mut classes: Vec<usize> = groups.keys().copied().collect();
    let (chosen, _) = classes.partial_shuffle(rng, n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut queries = Vec::with_capacity(n_way * queries_per_class);
    for (label, &class) in chosen.iter().enumerate() {
        let mut ids = groups[&class].clone();
        if ids.len() < need {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} samples, need {need}",
                ids.len()
            )));
        }
        let (picked, _) = ids.partial_shuffle(rng, need);
        for (j, &id) in picked.iter().enumerate() {
            let item = EpisodeItem {
                id,
                image: split.images[id].clone(),
                class: label,
                gt_box: split.boxes[id],
            };
            if j < k_shot {
                support.push(item);
            } else {
                queries.push(item);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        queries_per_class,
        support,
        queries,
        split: split.name.clone(),
    })
}

//! The embedding network: stacked `conv → relu → maxpool(2)` blocks whose
//! last activation is the feature map, followed by global average pooling.
//!
//! Parameters live in one flat vector. Each block stores its kernel
//! (`[ky][kx][ci][co]`) followed by its bias, blocks in order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::tns::{TnsData, TnsFile};

const POOL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub blocks: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub input_size: usize,
    pub input_channels: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            blocks: 3,
            channels: vec![8, 16, 32],
            kernel: 3,
            input_size: 32,
            input_channels: 3,
        }
    }
}

/// Offsets of one block's parameters inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub cin: usize,
    pub cout: usize,
    pub kernel_offset: usize,
    pub kernel_len: usize,
    pub bias_offset: usize,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.channels.len() != self.blocks {
            return bad(format!(
                "{} blocks but {} channel counts",
                self.blocks,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let stride = POOL.checked_pow(self.blocks as u32).unwrap_or(usize::MAX);
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.blocks
            ));
        }
        Ok(())
    }

    /// Spatial extent `h = w` of the feature map.
    pub fn fm_size(&self) -> usize {
        self.input_size >> self.blocks
    }

    /// Channel count `D` of the feature map and embedding.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated arch has blocks")
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        let mut cin = self.input_channels;
        self.channels
            .iter()
            .map(|&cout| {
                let kernel_len = self.kernel * self.kernel * cin * cout;
                let slot = LayerSlot {
                    cin,
                    cout,
                    kernel_offset: offset,
                    kernel_len,
                    bias_offset: offset + kernel_len,
                };
                offset += kernel_len + cout;
                cin = cout;
                slot
            })
            .collect()
    }

    pub fn param_len(&self) -> usize {
        self.layout().iter().map(|s| s.kernel_len + s.cout).sum()
    }

    fn geom(&self, slot: &LayerSlot, size: usize) -> ConvGeom {
        ConvGeom::new(size, size, slot.cin, slot.cout, self.kernel, 1, (self.kernel - 1) / 2)
            .expect("validated arch fits")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    arch: EncoderArch,
    values: Vec<f64>,
}

impl EncoderParams {
    /// He-uniform kernels, `U(-a, a)` with `a = sqrt(6 / (k·k·Cin))`, and zero biases.
    pub fn init(arch: &EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; arch.param_len()];
        for slot in arch.layout() {
            let bound = (6.0 / (arch.kernel * arch.kernel * slot.cin) as f64).sqrt();
            for v in &mut values[slot.kernel_offset..slot.bias_offset] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn from_values(arch: &EncoderArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_len() {
            return Err(shape_err!(
                "arch needs {} parameters, got {}",
                arch.param_len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Kernel of `block` as a `k×k×Cin×Cout` tensor.
    pub fn kernel_tensor(&self, block: usize) -> Tensor {
        let slot = self.arch.layout()[block];
        let k = self.arch.kernel;
        Tensor::from_parts(
            vec![k, k, slot.cin, slot.cout],
            self.values[slot.kernel_offset..slot.bias_offset].to_vec(),
        )
    }

    pub fn bias(&self, block: usize) -> &[f64] {
        let slot = self.arch.layout()[block];
        &self.values[slot.bias_offset..slot.bias_offset + slot.cout]
    }
}

/// Something that maps an image to an `h×w×D` feature map.
///
/// The evaluation harness is generic over this so that hand-built feature
/// extractors can stand in for a trained encoder.
pub trait FeatureExtractor: Sync {
    fn feature_map(&self, image: &Tensor) -> Result<Tensor>;
}

impl FeatureExtractor for EncoderParams {
    fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        forward(self, image).map(|(fm, _)| fm)
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    size: usize,
    input: Vec<f64>,
    preact: Tensor,
    act: Tensor,
}

/// Activations of one [`forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    arch: EncoderArch,
    blocks: Vec<BlockCache>,
}

fn check_image(arch: &EncoderArch, image: &Tensor) -> Result<()> {
    let want = [arch.input_size, arch.input_size, arch.input_channels];
    if image.shape() != want {
        return Err(shape_err!(
            "image {:?} does not match encoder input {want:?}",
            image.shape()
        ));
    }
    Ok(())
}

/// Runs the network and returns the final feature map with its cache.
pub fn forward(params: &EncoderParams, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let arch = &params.arch;
    check_image(arch, image)?;
    let mut blocks = Vec::with_capacity(arch.blocks);
    let mut size = arch.input_size;
    let mut current = image.data().to_vec();
    for slot in arch.layout() {
        let geom = arch.geom(&slot, size);
        let kernels = &params.values[slot.kernel_offset..slot.bias_offset];
        let bias = &params.values[slot.bias_offset..slot.bias_offset + slot.cout];
        let preact = Tensor::from_parts(
            vec![size, size, slot.cout],
            ops::conv2d_raw(&geom, &current, kernels, bias),
        );
        let act = ops::relu(&preact);
        let pooled = ops::maxpool2d(&act, POOL)?;
        blocks.push(BlockCache {
            size,
            input: std::mem::replace(&mut current, pooled.into_data()),
            preact,
            act,
        });
        size /= POOL;
    }
    let fm = Tensor::from_parts(vec![size, size, arch.feature_dim()], current);
    Ok((
        fm,
        ForwardCache {
            arch: arch.clone(),
            blocks,
        },
    ))
}

/// Global-average-pooled embedding `f(x)`.
pub fn embed(params: &EncoderParams, image: &Tensor) -> Result<Vec<f64>> {
    let (fm, _) = forward(params, image)?;
    ops::global_avg_pool(&fm)
}

/// Parameter gradient of a scalar loss given its gradient with respect to the feature map.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_fm: &Tensor) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    backward_into(params, cache, grad_fm, &mut grad)?;
    Ok(grad)
}

/// Like [`backward`], adding into an existing gradient buffer.
pub fn backward_into(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_fm: &Tensor,
    grad: &mut [f64],
) -> Result<()> {
    let arch = &params.arch;
    if cache.arch != *arch || cache.blocks.len() != arch.blocks {
        return Err(Error::CacheMismatch(
            "cache was produced by a different architecture".into(),
        ));
    }
    if grad.len() != params.len() {
        return Err(shape_err!(
            "gradient buffer has {} entries, params have {}",
            grad.len(),
            params.len()
        ));
    }
    let fm_shape = [arch.fm_size(), arch.fm_size(), arch.feature_dim()];
    if grad_fm.shape() != fm_shape {
        return Err(shape_err!(
            "grad_fm {:?} does not match feature map {fm_shape:?}",
            grad_fm.shape()
        ));
    }
    let layout = arch.layout();
    let mut upstream = grad_fm.clone();
    for (b, (slot, bc)) in layout.iter().zip(&cache.blocks).enumerate().rev() {
        let g_act = ops::maxpool2d_vjp(&bc.act, POOL, &upstream)?;
        let g_pre = ops::relu_vjp(&bc.preact, &g_act)?;
        let geom = arch.geom(slot, bc.size);
        let (gk, rest) = grad[slot.kernel_offset..].split_at_mut(slot.kernel_len);
        let gb = &mut rest[..slot.cout];
        let kernels = &params.values[slot.kernel_offset..slot.bias_offset];
        if b == 0 {
            ops::conv2d_backward_raw(&geom, &bc.input, kernels, g_pre.data(), gk, gb, None);
        } else {
            let mut gi = vec![0.0; bc.input.len()];
            ops::conv2d_backward_raw(&geom, &bc.input, kernels, g_pre.data(), gk, gb, Some(&mut gi));
            upstream = Tensor::from_parts(vec![bc.size, bc.size, slot.cin], gi);
        }
    }
    Ok(())
}

/// `params - lr·grads`, returned as new parameters.
pub fn sgd_step(params: &EncoderParams, grads: &[f64], lr: f64) -> Result<EncoderParams> {
    if grads.len() != params.len() {
        return Err(shape_err!(
            "gradient length {} does not match parameter length {}",
            grads.len(),
            params.len()
        ));
    }
    let values = params
        .values
        .iter()
        .zip(grads)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(EncoderParams {
        arch: params.arch.clone(),
        values,
    })
}

/// Sidecar manifest describing a checkpoint's parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: EncoderArch,
    pub seed: u64,
    pub param_count: usize,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub seed: u64,
    pub stage: String,
}

impl Checkpoint {
    /// `<path>.json`, e.g. `model.tns.json`.
    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    /// Writes the flat vector as an `f64` TNS1 file and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        TnsFile {
            shape: vec![self.params.len()],
            data: TnsData::F64(self.params.values.clone()),
        }
        .write(path)?;
        let manifest = CheckpointManifest {
            arch: self.params.arch.clone(),
            seed: self.seed,
            param_count: self.params.len(),
            stage: self.stage.clone(),
        };
        let side = Self::manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::manifest_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let values = TnsFile::read(path)?.into_tensor()?.into_data();
        if values.len() != manifest.param_count {
            return Err(Error::format(path, "parameter count disagrees with manifest"));
        }
        Ok(Self {
            params: EncoderParams::from_values(&manifest.arch, values)?,
            seed: manifest.seed,
            stage: manifest.stage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, norm_rel_err, random_nonneg, rng};

    fn small_arch() -> EncoderArch {
        EncoderArch {
            blocks: 2,
            channels: vec![4, 6],
            kernel: 3,
            input_size: 16,
            input_channels: 3,
        }
    }

    #[test]
    fn arch_validation() {
        assert!(EncoderArch::default().validate().is_ok());
        let mut a = EncoderArch::default();
        a.channels.pop();
        assert!(a.validate().is_err());
        let mut a = EncoderArch::default();
        a.input_size = 36;
        assert!(a.validate().is_err());
        let mut a = EncoderArch::default();
        a.kernel = 2;
        assert!(a.validate().is_err());
    }

    #[test]
    fn layout_length_matches_formula() {
        let arch = EncoderArch::default();
        let expected = (9 * 3 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 32 + 32);
        assert_eq!(arch.param_len(), expected);
        let p = EncoderParams::init(&arch, 0).unwrap();
        assert_eq!(p.len(), expected);
        let slots = arch.layout();
        assert_eq!(slots[1].kernel_offset, 9 * 3 * 8 + 8);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = EncoderArch::default();
        let a = EncoderParams::init(&arch, 42).unwrap();
        let b = EncoderParams::init(&arch, 42).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, EncoderParams::init(&arch, 43).unwrap());
        for (block, slot) in arch.layout().iter().enumerate() {
            assert!(a.bias(block).iter().all(|&v| v == 0.0));
            let bound = (6.0 / (9 * slot.cin) as f64).sqrt();
            let kernel = &a.values()[slot.kernel_offset..slot.bias_offset];
            assert!(kernel.iter().all(|v| v.abs() < bound));
            // Only the last block has enough draws for the mean check.
            if kernel.len() >= 4000 {
                let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
                assert!(mean.abs() < bound / 10.0);
            }
        }
    }

    #[test]
    fn init_statistics_over_many_draws() {
        let arch = EncoderArch {
            blocks: 1,
            channels: vec![400],
            kernel: 3,
            input_size: 2,
            input_channels: 3,
        };
        let p = EncoderParams::init(&arch, 9).unwrap();
        let bound = (6.0f64 / 27.0).sqrt();
        let kernel = &p.values()[..27 * 400];
        assert!(kernel.len() >= 10_000);
        assert!(kernel.iter().all(|v| v.abs() < bound));
        let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
        assert!(mean.abs() < bound / 10.0);
    }

    #[test]
    fn forward_shapes_and_zero_image() {
        let arch = EncoderArch::default();
        let p = EncoderParams::init(&arch, 1).unwrap();
        let (fm, _) = forward(&p, &Tensor::zeros(&[32, 32, 3])).unwrap();
        assert_eq!(fm.shape(), &[4, 4, 32]);
        assert!(fm.data().iter().all(|&v| v == 0.0));
        assert_eq!(embed(&p, &Tensor::zeros(&[32, 32, 3])).unwrap(), vec![0.0; 32]);
        assert!(forward(&p, &Tensor::zeros(&[16, 16, 3])).is_err());
    }

    #[test]
    fn forward_equals_manual_chaining() {
        let arch = small_arch();
        let mut p = EncoderParams::init(&arch, 2).unwrap();
        let mut r = rng(3);
        // Nonzero biases so the bias path is exercised.
        let mut values = p.values().to_vec();
        for slot in arch.layout() {
            for v in &mut values[slot.bias_offset..slot.bias_offset + slot.cout] {
                *v = 0.05;
            }
        }
        p = EncoderParams::from_values(&arch, values).unwrap();
        let image = random_nonneg(&mut r, &[16, 16, 3]);
        let mut x = image.clone();
        for b in 0..arch.blocks {
            let c = ops::conv2d(&x, &p.kernel_tensor(b), p.bias(b), 1, 1).unwrap();
            x = ops::maxpool2d(&ops::relu(&c), 2).unwrap();
        }
        let (fm, _) = forward(&p, &image).unwrap();
        assert_eq!(fm.max_abs_diff(&x), 0.0);
        let e = embed(&p, &image).unwrap();
        assert_eq!(e, ops::global_avg_pool(&x).unwrap());
    }

    #[test]
    fn backward_zero_and_length() {
        let arch = small_arch();
        let p = EncoderParams::init(&arch, 4).unwrap();
        let mut r = rng(5);
        let (_, cache) = forward(&p, &random_nonneg(&mut r, &[16, 16, 3])).unwrap();
        let g = backward(&p, &cache, &Tensor::zeros(&[4, 4, 6])).unwrap();
        assert_eq!(g.len(), p.len());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let p = EncoderParams::init(&small_arch(), 4).unwrap();
        let other = EncoderParams::init(&EncoderArch::default(), 4).unwrap();
        let (_, cache) = forward(&other, &Tensor::zeros(&[32, 32, 3])).unwrap();
        assert!(matches!(
            backward(&p, &cache, &Tensor::zeros(&[4, 4, 6])),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_sum() {
        let arch = small_arch();
        let p = EncoderParams::init(&arch, 6).unwrap();
        let mut r = rng(7);
        let image = random_nonneg(&mut r, &[16, 16, 3]);
        let (fm, cache) = forward(&p, &image).unwrap();
        let grad = backward(&p, &cache, &Tensor::filled(fm.shape(), 1.0)).unwrap();
        let fd = central_diff(p.values(), |v| {
            let q = EncoderParams::from_values(&arch, v.to_vec()).unwrap();
            forward(&q, &image).unwrap().0.data().iter().sum()
        });
        assert!(norm_rel_err(&grad, &fd) <= 1e-5, "{}", norm_rel_err(&grad, &fd));
    }

    #[test]
    fn sgd_step_cases() {
        let arch = small_arch();
        let p = EncoderParams::init(&arch, 8).unwrap();
        let g: Vec<f64> = p.values().iter().map(|v| v * 0.5 + 0.01).collect();
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let own = p.values().to_vec();
        assert!(sgd_step(&p, &own, 1.0).unwrap().values().iter().all(|&v| v == 0.0));
        let half = sgd_step(&sgd_step(&p, &g, 0.125).unwrap(), &g, 0.125).unwrap();
        let full = sgd_step(&p, &g, 0.25).unwrap();
        for (a, b) in half.values().iter().zip(full.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(sgd_step(&p, &g[1..], 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tns");
        let params = EncoderParams::init(&EncoderArch::default(), 11).unwrap();
        let ckpt = Checkpoint {
            params,
            seed: 11,
            stage: "init".into(),
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back
            .params
            .values()
            .iter()
            .zip(ckpt.params.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, ckpt);
    }
}

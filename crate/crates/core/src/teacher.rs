//! Frozen convolutional feature pyramid and patch partitioning.
//!
//! The encoder is a fixed, seeded surrogate for a pre-trained backbone:
//! K blocks of (conv3x3 stride 2, relu, conv3x3 stride 1, relu). Real
//! backbone features can be substituted via `load_features`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::kernels;
use crate::rng::{self, Fnv64};
use crate::synth::{Image, Mask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            channels: vec![16, 32, 64],
        }
    }
}

impl EncoderConfig {
    pub fn k_levels(&self) -> usize {
        self.channels.len()
    }

    /// Level shapes for an h×w input under the stride plan.
    pub fn level_dims(&self, h: usize, w: usize) -> Vec<Vec<usize>> {
        self.channels
            .iter()
            .enumerate()
            .map(|(k, &c)| vec![c, h >> (k + 1), w >> (k + 1)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Frozen encoder weights. Immutable after construction; `hash` pins the
/// byte content so training stages can prove they never touched it.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    config: EncoderConfig,
    blocks: Vec<ConvBlock>,
    seed: u64,
}

/// Shared positive component added to every channel after standardization.
/// Pre-trained backbones sit in this regime: patch features correlate
/// moderately (cross-patch cosine ~0.4) while still spreading in direction.
/// Plain relu pyramids have an uncontrolled, input-dependent shared
/// component instead, which collapses cosine matching.
pub const FEATURE_DC: f32 = 0.8;

/// Per-channel spatial standardization plus a fixed offset: each channel
/// map gets zero mean and unit variance over its positions, then the
/// constant `FEATURE_DC` is added.
fn instance_standardize(data: &mut [f32], channels: usize, hw: usize) {
    for c in 0..channels {
        let chan = &mut data[c * hw..(c + 1) * hw];
        let mean = chan.iter().sum::<f32>() / hw as f32;
        let var = chan.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / hw as f32;
        let inv = 1.0 / (var + 1e-3).sqrt();
        for v in chan.iter_mut() {
            *v = (*v - mean) * inv + FEATURE_DC;
        }
    }
}

impl EncoderWeights {
    /// Fan-in-scaled Gaussian init from a fixed seed, then frozen.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = config.in_channels;
        for (k, &cout) in config.channels.iter().enumerate() {
            let s = rng::mix(seed, 0x7E00 + k as u64);
            let std1 = (2.0 / (cin * 9) as f32).sqrt();
            let std2 = (2.0 / (cout * 9) as f32).sqrt();
            blocks.push(ConvBlock {
                w1: rng::gaussian(vec![cout, cin, 3, 3], std1, rng::mix(s, 1)),
                b1: Tensor::zeros(vec![cout]),
                w2: rng::gaussian(vec![cout, cout, 3, 3], std2, rng::mix(s, 2)),
                b2: Tensor::zeros(vec![cout]),
            });
            cin = cout;
        }
        EncoderWeights {
            config,
            blocks,
            seed,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for b in &self.blocks {
            for t in [&b.w1, &b.b1, &b.w2, &b.b2] {
                rng::hash_tensor(&mut h, t);
            }
        }
        h.finish()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("teacher/block{k}/w1"), b.w1.clone()));
            out.push((format!("teacher/block{k}/b1"), b.b1.clone()));
            out.push((format!("teacher/block{k}/w2"), b.w2.clone()));
            out.push((format!("teacher/block{k}/b2"), b.b2.clone()));
        }
        out
    }

    /// Extract the K-level feature pyramid of an image.
    pub fn encode(&self, image: &Image) -> Result<FeaturePyramid> {
        let k = self.config.k_levels();
        let (h, w) = (image.height(), image.width());
        if h % (1 << k) != 0 || w % (1 << k) != 0 {
            return Err(Error::InvalidArgument {
                context: format!("image {h}x{w} not divisible by 2^{k}"),
            });
        }
        if image.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                context: "encode".into(),
                expected: format!("{} input channels", self.config.in_channels),
                got: format!("{}", image.channels()),
            });
        }
        let mut levels = Vec::with_capacity(k);
        let mut x = image.tensor().clone();
        let mut cin = self.config.in_channels;
        let (mut ch, mut cw) = (h, w);
        for (bi, block) in self.blocks.iter().enumerate() {
            let cout = self.config.channels[bi];
            let (y1, oh, ow) = kernels::conv2d(
                x.data(),
                block.w1.data(),
                block.b1.data(),
                cin,
                ch,
                cw,
                cout,
                2,
            );
            let y1 = kernels::relu(&y1);
            let (y2, _, _) = kernels::conv2d(&y1, block.w2.data(), block.b2.data(), cout, oh, ow, cout, 1);
            let mut y2 = kernels::relu(&y2);
            instance_standardize(&mut y2, cout, oh * ow);
            let level = Tensor::new(vec![cout, oh, ow], y2)?;
            if !level.is_finite() {
                return Err(Error::NonFinite {
                    op: "encode",
                    node: bi,
                });
            }
            x = level.clone();
            levels.push(level);
            cin = cout;
            ch = oh;
            cw = ow;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// K per-level feature maps, level k shaped C_k × H_k × W_k.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn k_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Persist a pyramid under names `level0..level{K-1}`.
pub fn save_features(path: &Path, pyramid: &FeaturePyramid) -> Result<()> {
    let mut m = BTreeMap::new();
    for (k, t) in pyramid.levels.iter().enumerate() {
        m.insert(format!("level{k}"), t.clone());
    }
    io::save_tensors(path, &m)
}

/// Load a pyramid, validating the level count against the configured K.
pub fn load_features(path: &Path, expected_k: usize) -> Result<FeaturePyramid> {
    let tensors = io::load_tensors(path)?;
    if tensors.len() != expected_k {
        return Err(Error::Format {
            path: path.display().to_string(),
            message: format!("file has {} levels, config wants K={expected_k}", tensors.len()),
        });
    }
    let mut levels = Vec::with_capacity(expected_k);
    for k in 0..expected_k {
        let name = format!("level{k}");
        let t = tensors.get(&name).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            message: format!("missing tensor `{name}`"),
        })?;
        if t.rank() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("`{name}` must be rank 3, got {:?}", t.dims()),
            });
        }
        levels.push(t.clone());
    }
    Ok(FeaturePyramid { levels })
}

/// Any-pooled mask at level k resolution: a cell is 1 iff any covered pixel is 1.
pub fn subsample_mask(mask: &Mask, k: usize) -> Mask {
    let factor = 1usize << (k + 1);
    let (h, w) = (mask.height() / factor, mask.width() / factor);
    let mut data = vec![0u8; h * w];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                data[(y / factor) * w + (x / factor)] = 1;
            }
        }
    }
    Mask::new(h, w, data).expect("mask dims")
}

/// Patch-level split of one feature map by the level mask.
#[derive(Clone, Debug)]
pub struct PatchPartition {
    pub c: usize,
    pub normal_idx: Vec<usize>,
    pub abnormal_idx: Vec<usize>,
    /// N^n × C matrix; None when no normal patches exist.
    pub normal: Option<Tensor>,
    /// N^a × C matrix; None when no abnormal patches exist.
    pub abnormal: Option<Tensor>,
}

/// C×H×W feature map as an (H·W)×C patch matrix, patches in row-major order.
pub fn features_to_patches(level: &Tensor) -> Tensor {
    let dims = level.dims();
    let (c, hw) = (dims[0], dims[1] * dims[2]);
    let data = kernels::transpose(level.data(), c, hw);
    Tensor::new(vec![hw, c], data).expect("patch dims")
}

/// (H·W)×C patch matrix back to a C×H×W map.
pub fn patches_to_features(patches: &Tensor, h: usize, w: usize) -> Tensor {
    let dims = patches.dims();
    let (hw, c) = (dims[0], dims[1]);
    debug_assert_eq!(hw, h * w);
    let data = kernels::transpose(patches.data(), hw, c);
    Tensor::new(vec![c, h, w], data).expect("feature dims")
}

pub fn partition_patches(level: &Tensor, level_mask: &Mask) -> Result<PatchPartition> {
    let dims = level.dims();
    if dims.len() != 3 || dims[1] != level_mask.height() || dims[2] != level_mask.width() {
        return Err(Error::ShapeMismatch {
            context: "partition_patches".into(),
            expected: format!("mask {}x{}", dims[1], dims[2]),
            got: format!("{}x{}", level_mask.height(), level_mask.width()),
        });
    }
    let c = dims[0];
    let patches = features_to_patches(level);
    let mut normal_idx = Vec::new();
    let mut abnormal_idx = Vec::new();
    for (p, &bit) in level_mask.data().iter().enumerate() {
        if bit == 1 {
            abnormal_idx.push(p);
        } else {
            normal_idx.push(p);
        }
    }
    let gather_rows = |idx: &[usize]| -> Option<Tensor> {
        if idx.is_empty() {
            return None;
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &p in idx {
            data.extend_from_slice(&patches.data()[p * c..(p + 1) * c]);
        }
        Some(Tensor::new(vec![idx.len(), c], data).expect("partition dims"))
    };
    Ok(PatchPartition {
        c,
        normal: gather_rows(&normal_idx),
        abnormal: gather_rows(&abnormal_idx),
        normal_idx,
        abnormal_idx,
    })
}

impl PatchPartition {
    pub fn n_normal(&self) -> usize {
        self.normal_idx.len()
    }

    pub fn n_abnormal(&self) -> usize {
        self.abnormal_idx.len()
    }

    /// Rebuild the full patch matrix from the two partitions.
    pub fn reassemble(&self) -> Tensor {
        let total = self.n_normal() + self.n_abnormal();
        let mut data = vec![0.0f32; total * self.c];
        if let Some(n) = &self.normal {
            for (row, &p) in self.normal_idx.iter().enumerate() {
                data[p * self.c..(p + 1) * self.c]
                    .copy_from_slice(&n.data()[row * self.c..(row + 1) * self.c]);
            }
        }
        if let Some(a) = &self.abnormal {
            for (row, &p) in self.abnormal_idx.iter().enumerate() {
                data[p * self.c..(p + 1) * self.c]
                    .copy_from_slice(&a.data()[row * self.c..(row + 1) * self.c]);
            }
        }
        Tensor::new(vec![total, self.c], data).expect("reassemble dims")
    }
}

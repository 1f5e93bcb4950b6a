//! Procedural normal textures and synthetic anomaly generation.
//!
//! Corrupted samples follow the classic recipe: a Perlin noise field is
//! binarized into an anomaly mask, intersected with a foreground mask from
//! grayscale Otsu thresholding, and the masked region is alpha-blended with
//! an out-of-family texture. Outside the mask the corrupted image equals
//! the normal image bit-exactly.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{mix, rng};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- images

/// C×H×W image with all values in [0,1]. C is 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 || (dims[0] != 1 && dims[0] != 3) {
            return Err(Error::InvalidArgument {
                context: format!("image dims must be [1|3,h,w], got {dims:?}"),
            });
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument {
                context: "image values must lie in [0,1]".into(),
            });
        }
        Ok(Image(t))
    }

    fn from_gray(h: usize, w: usize, channels: usize, gray: Vec<f32>) -> Self {
        let data = if channels == 1 {
            gray
        } else {
            let mut d = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                d.extend_from_slice(&gray);
            }
            d
        };
        Image(Tensor::new(vec![channels, h, w], data).expect("image dims"))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    /// Channel-mean grayscale, length h*w.
    pub fn to_gray(&self) -> Vec<f32> {
        let (c, hw) = (self.channels(), self.height() * self.width());
        let mut gray = vec![0.0f32; hw];
        for ch in 0..c {
            for p in 0..hw {
                gray[p] += self.0.data()[ch * hw + p];
            }
        }
        for g in &mut gray {
            *g /= c as f32;
        }
        gray
    }
}

// ----------------------------------------------------------------- masks

/// Binary H×W mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                context: "Mask::new".into(),
                expected: format!("{} entries", h * w),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument {
                context: "mask entries must be 0 or 1".into(),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.h, self.w],
            self.data.iter().map(|&b| b as f32).collect(),
        )
        .expect("mask dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 2 {
            return Err(Error::InvalidArgument {
                context: format!("mask tensor must be rank 2, got {dims:?}"),
            });
        }
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.5 { 1u8 } else { 0u8 })
            .collect();
        Mask::new(dims[0], dims[1], data)
    }
}

// ---------------------------------------------------------------- perlin

fn hash01(seed: u64, gy: u64, gx: u64) -> f64 {
    (mix(mix(seed, gy), gx) >> 11) as f64 / (1u64 << 53) as f64
}

fn lattice_gradient(seed: u64, gy: usize, gx: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * hash01(seed, gy as u64, gx as u64);
    (angle.cos(), angle.sin())
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Single-octave gradient noise on a lattice of the given period, rescaled
/// so max |value| is 1. Values at lattice points are exactly zero.
pub fn perlin_field(seed: u64, h: usize, w: usize, grid_period: usize) -> Result<Tensor> {
    if grid_period == 0 || h % grid_period != 0 || w % grid_period != 0 {
        return Err(Error::InvalidArgument {
            context: format!("perlin period {grid_period} must divide {h}x{w}"),
        });
    }
    let gh = h / grid_period;
    let gw = w / grid_period;
    // gradient grid, wrapped so the field tiles
    let grads: Vec<(f64, f64)> = (0..gh * gw)
        .map(|i| lattice_gradient(seed, i / gw, i % gw))
        .collect();
    let grad_at = |gy: usize, gx: usize| grads[(gy % gh) * gw + (gx % gw)];

    let mut field = vec![0.0f32; h * w];
    let inv = 1.0 / grid_period as f64;
    for y in 0..h {
        let gy0 = y / grid_period;
        let fy = (y % grid_period) as f64 * inv;
        let uy = fade(fy);
        for x in 0..w {
            let gx0 = x / grid_period;
            let fx = (x % grid_period) as f64 * inv;
            let ux = fade(fx);
            let g00 = grad_at(gy0, gx0);
            let g01 = grad_at(gy0, gx0 + 1);
            let g10 = grad_at(gy0 + 1, gx0);
            let g11 = grad_at(gy0 + 1, gx0 + 1);
            let n00 = g00.0 * fx + g00.1 * fy;
            let n01 = g01.0 * (fx - 1.0) + g01.1 * fy;
            let n10 = g10.0 * fx + g10.1 * (fy - 1.0);
            let n11 = g11.0 * (fx - 1.0) + g11.1 * (fy - 1.0);
            let top = n00 + ux * (n01 - n00);
            let bot = n10 + ux * (n11 - n10);
            field[y * w + x] = (top + uy * (bot - top)) as f32;
        }
    }
    let peak = field.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut field {
            *v /= peak;
        }
    }
    Tensor::new(vec![h, w], field)
}

/// mask[i] = 1 iff field[i] > threshold.
pub fn binarize(field: &Tensor, threshold: f32) -> Result<Mask> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument {
            context: "binarize threshold must be finite".into(),
        });
    }
    let dims = field.dims();
    if dims.len() != 2 {
        return Err(Error::InvalidArgument {
            context: format!("binarize expects an HxW field, got {dims:?}"),
        });
    }
    let data = field
        .data()
        .iter()
        .map(|&v| if v > threshold { 1u8 } else { 0u8 })
        .collect();
    Mask::new(dims[0], dims[1], data)
}

// ------------------------------------------------------------------ otsu

/// Otsu threshold over the 256-bin grayscale histogram; returns the bin t*
/// maximizing between-class variance (lowest t on ties), or None when every
/// split is degenerate (constant image).
pub fn otsu_threshold(gray_bins: &[usize; 256]) -> Option<usize> {
    let total: usize = gray_bins.iter().sum();
    let total_f = total as f64;
    let mut weighted_total = 0.0f64;
    for (v, &n) in gray_bins.iter().enumerate() {
        weighted_total += (v * n) as f64;
    }
    let mut best: Option<(usize, f64)> = None;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..256 {
        w0 += gray_bins[t] as f64;
        sum0 += (t * gray_bins[t]) as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let sigma = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        match best {
            Some((_, s)) if s >= sigma => {}
            _ => best = Some((t, sigma)),
        }
    }
    best.filter(|&(_, s)| s > 0.0).map(|(t, _)| t)
}

pub fn gray_bin(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Foreground mask: pixels brighter than the Otsu threshold. A constant
/// image yields an all-one mask.
pub fn foreground_mask(image: &Image) -> Mask {
    let gray = image.to_gray();
    let mut bins = [0usize; 256];
    for &g in &gray {
        bins[gray_bin(g)] += 1;
    }
    match otsu_threshold(&bins) {
        Some(t) => {
            let data = gray
                .iter()
                .map(|&g| if gray_bin(g) > t { 1u8 } else { 0u8 })
                .collect();
            Mask::new(image.height(), image.width(), data).expect("mask dims")
        }
        None => Mask::ones(image.height(), image.width()),
    }
}

/// Elementwise AND of the anomaly and foreground masks.
pub fn compose_mask(anomaly: &Mask, foreground: &Mask) -> Result<Mask> {
    if anomaly.h != foreground.h || anomaly.w != foreground.w {
        return Err(Error::ShapeMismatch {
            context: "compose_mask".into(),
            expected: format!("{}x{}", anomaly.h, anomaly.w),
            got: format!("{}x{}", foreground.h, foreground.w),
        });
    }
    let data = anomaly
        .data
        .iter()
        .zip(&foreground.data)
        .map(|(&a, &f)| a & f)
        .collect();
    Mask::new(anomaly.h, anomaly.w, data)
}

/// Blend `texture` over `normal` inside the mask with opacity `beta`;
/// outside the mask the output equals `normal` bit-exactly.
pub fn synthesize_anomaly(normal: &Image, texture: &Image, mask: &Mask, beta: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument {
            context: format!("blend opacity must lie in [0,1], got {beta}"),
        });
    }
    if normal.tensor().dims() != texture.tensor().dims()
        || normal.height() != mask.h
        || normal.width() != mask.w
    {
        return Err(Error::ShapeMismatch {
            context: "synthesize_anomaly".into(),
            expected: format!("{:?}", normal.tensor().dims()),
            got: format!("{:?} / mask {}x{}", texture.tensor().dims(), mask.h, mask.w),
        });
    }
    let (c, hw) = (normal.channels(), mask.h * mask.w);
    let mut out = normal.tensor().data().to_vec();
    for p in 0..hw {
        if mask.data[p] == 1 {
            for ch in 0..c {
                let i = ch * hw + p;
                out[i] = (1.0 - beta) * normal.tensor().data()[i] + beta * texture.tensor().data()[i];
            }
        }
    }
    Image::new(Tensor::new(normal.tensor().dims().to_vec(), out)?)
}

// ------------------------------------------------------ texture families

/// Procedural normal-product families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormalClass {
    Stripes,
    Checker,
    Blobs,
    GridObject,
}

impl NormalClass {
    pub const ALL: [NormalClass; 4] = [
        NormalClass::Stripes,
        NormalClass::Checker,
        NormalClass::Blobs,
        NormalClass::GridObject,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(NormalClass::Stripes),
            "checker" => Ok(NormalClass::Checker),
            "blobs" => Ok(NormalClass::Blobs),
            "grid-object" => Ok(NormalClass::GridObject),
            other => Err(Error::InvalidArgument {
                context: format!("unknown texture family `{other}`"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormalClass::Stripes => "stripes",
            NormalClass::Checker => "checker",
            NormalClass::Blobs => "blobs",
            NormalClass::GridObject => "grid-object",
        }
    }
}

impl fmt::Display for NormalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const STRIPE_PERIOD: usize = 8;

fn pixel_noise(base: &mut Vec<f32>, amp: f32, seed: u64) {
    let mut r = rng(seed);
    for v in base.iter_mut() {
        *v = (*v + r.random_range(-amp..amp)).clamp(0.0, 1.0);
    }
}

fn soft_disc(gray: &mut [f32], w: usize, cy: f32, cx: f32, radius: f32, amp: f32) {
    let h = gray.len() / w;
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            let fall = (-d2 / (2.0 * radius * radius)).exp();
            gray[y * w + x] = (gray[y * w + x] + amp * fall).clamp(0.0, 1.0);
        }
    }
}

/// Deterministic normal-product image for (family, seed).
pub fn gen_normal_texture(class: NormalClass, seed: u64, h: usize, w: usize, channels: usize) -> Image {
    let mut r = rng(mix(seed, 0xA0));
    let mut gray = vec![0.0f32; h * w];
    match class {
        NormalClass::Stripes => {
            let amp = 0.25 + 0.08 * r.random_range(0.0..1.0f32);
            let phase = r.random_range(0.0..STRIPE_PERIOD as f32);
            for y in 0..h {
                for x in 0..w {
                    let s = (2.0 * std::f32::consts::PI * (x as f32 + phase) / STRIPE_PERIOD as f32).sin();
                    gray[y * w + x] = (0.5 + amp * s).clamp(0.0, 1.0);
                }
            }
        }
        NormalClass::Checker => {
            let cell = 8usize;
            let hi = 0.68 + 0.08 * r.random_range(0.0..1.0f32);
            let lo = 0.30 - 0.08 * r.random_range(0.0..1.0f32);
            let sy = r.random_range(0..cell);
            let sx = r.random_range(0..cell);
            for y in 0..h {
                for x in 0..w {
                    let par = ((y + sy) / cell + (x + sx) / cell) % 2;
                    gray[y * w + x] = if par == 0 { hi } else { lo };
                }
            }
        }
        NormalClass::Blobs => {
            gray.fill(0.30);
            let step = 16usize;
            for by in 0..h / step {
                for bx in 0..w / step {
                    let cy = (by * step + step / 2) as f32 + r.random_range(-2.0..2.0f32);
                    let cx = (bx * step + step / 2) as f32 + r.random_range(-2.0..2.0f32);
                    let rad = 4.0 + r.random_range(0.0..1.5f32);
                    soft_disc(&mut gray, w, cy, cx, rad, 0.45);
                }
            }
        }
        NormalClass::GridObject => {
            gray.fill(0.18);
            for y in 0..h {
                for x in 0..w {
                    if y % 8 == 0 || x % 8 == 0 {
                        gray[y * w + x] = 0.32;
                    }
                }
            }
            let cy = h as f32 / 2.0 + r.random_range(-3.0..3.0f32);
            let cx = w as f32 / 2.0 + r.random_range(-3.0..3.0f32);
            let rad = 0.22 * h as f32 + r.random_range(-2.0..2.0f32);
            // hard disc with a soft rim so the object dominates the bright class
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    if d < rad {
                        gray[y * w + x] = 0.82;
                    } else if d < rad + 2.0 {
                        gray[y * w + x] = 0.82 - 0.3 * (d - rad) / 2.0;
                    }
                }
            }
        }
    }
    pixel_noise(&mut gray, 0.015, mix(seed, 0xA1));
    Image::from_gray(h, w, channels, gray)
}

/// Anomaly-content texture, drawn from families disjoint from the normal
/// ones: blocky high-frequency noise or dense contrasting discs. Both
/// carry energy at coarse scales so deep pyramid levels see them too.
pub fn texture_source(seed: u64, h: usize, w: usize, channels: usize) -> Image {
    let mut r = rng(mix(seed, 0xB0));
    let mut gray = vec![0.0f32; h * w];
    if mix(seed, 0xB1) % 2 == 0 {
        // block noise: independent uniform values on a 3x3 grid
        let block = 3usize;
        let bw = w.div_ceil(block);
        let bh = h.div_ceil(block);
        let cells: Vec<f32> = (0..bh * bw).map(|_| r.random_range(0.0..1.0f32)).collect();
        for y in 0..h {
            for x in 0..w {
                gray[y * w + x] = cells[(y / block) * bw + (x / block)];
            }
        }
        pixel_noise(&mut gray, 0.05, mix(seed, 0xB2));
    } else {
        gray.fill(0.5);
        let count = (h * w) / 96;
        for _ in 0..count {
            let cy = r.random_range(0.0..h as f32);
            let cx = r.random_range(0.0..w as f32);
            let rad = r.random_range(2.5..5.5f32);
            let amp = if r.random_range(0..2) == 0 { 0.48 } else { -0.48 };
            soft_disc(&mut gray, w, cy, cx, rad, amp);
        }
    }
    Image::from_gray(h, w, channels, gray)
}

// ---------------------------------------------------------------- corpus

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub classes: Vec<NormalClass>,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub perlin_period: usize,
    pub perlin_threshold: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    /// Minimum anomalous area as a fraction of the image; Perlin seeds are
    /// redrawn until the intersected mask reaches it.
    pub min_mask_frac: f32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            classes: NormalClass::ALL.to_vec(),
            train_per_class: 200,
            test_normal_per_class: 50,
            test_anomalous_per_class: 50,
            image_size: 64,
            channels: 1,
            perlin_period: 8,
            perlin_threshold: 0.5,
            beta_min: 0.15,
            beta_max: 1.0,
            min_mask_frac: 0.01,
            seed: 0,
        }
    }
}

/// A corrupted sample plus everything needed to re-derive it.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub normal: Image,
    pub corrupted: Image,
    pub mask: Mask,
    pub seed: u64,
}

/// Build a corrupted counterpart of `normal`, redrawing the Perlin seed
/// until the intersected mask covers at least `min_frac` of the pixels.
pub fn make_synth_sample(normal: &Image, spec: &CorpusSpec, sample_seed: u64) -> Result<SynthSample> {
    let (h, w) = (normal.height(), normal.width());
    let fg = foreground_mask(normal);
    let min_pixels = ((h * w) as f32 * spec.min_mask_frac).ceil() as usize;
    let mut mask = None;
    for attempt in 0..64u64 {
        let field = perlin_field(mix(sample_seed, 0x50 + attempt), h, w, spec.perlin_period)?;
        let candidate = compose_mask(&binarize(&field, spec.perlin_threshold)?, &fg)?;
        if candidate.count_ones() >= min_pixels.max(1) {
            mask = Some(candidate);
            break;
        }
    }
    let mask = mask.ok_or_else(|| Error::Contract {
        message: format!("could not draw a non-empty anomaly mask (seed {sample_seed})"),
    })?;
    let texture = texture_source(mix(sample_seed, 0x60), h, w, spec.channels);
    let beta = {
        let mut r = rng(mix(sample_seed, 0x61));
        r.random_range(spec.beta_min..spec.beta_max)
    };
    let corrupted = synthesize_anomaly(normal, &texture, &mask, beta)?;
    Ok(SynthSample {
        normal: normal.clone(),
        corrupted,
        mask,
        seed: sample_seed,
    })
}

#[derive(Clone, Debug)]
pub struct TestSample {
    pub image: Image,
    pub mask: Mask,
    pub anomalous: bool,
}

/// In-memory per-class corpus.
#[derive(Clone, Debug)]
pub struct ClassCorpus {
    pub class: NormalClass,
    pub train: Vec<Image>,
    pub train_synth: Vec<SynthSample>,
    pub test: Vec<TestSample>,
}

pub fn class_seed(spec_seed: u64, class_idx: usize) -> u64 {
    mix(spec_seed, 0xC1A5_5000 + class_idx as u64)
}

/// Generate one class's corpus. Training images are normal; each also gets
/// a corrupted counterpart for the amplification stage.
pub fn generate_class(spec: &CorpusSpec, class_idx: usize) -> Result<ClassCorpus> {
    let class = spec.classes[class_idx];
    let cs = class_seed(spec.seed, class_idx);
    let (h, w, c) = (spec.image_size, spec.image_size, spec.channels);

    let mut train = Vec::with_capacity(spec.train_per_class);
    let mut train_synth = Vec::with_capacity(spec.train_per_class);
    for i in 0..spec.train_per_class {
        let s = mix(cs, 0x1000 + i as u64);
        let img = gen_normal_texture(class, s, h, w, c);
        train_synth.push(make_synth_sample(&img, spec, mix(s, 0x11))?);
        train.push(img);
    }

    let mut test = Vec::new();
    for i in 0..spec.test_normal_per_class {
        let s = mix(cs, 0x2000 + i as u64);
        test.push(TestSample {
            image: gen_normal_texture(class, s, h, w, c),
            mask: Mask::zeros(h, w),
            anomalous: false,
        });
    }
    for i in 0..spec.test_anomalous_per_class {
        let s = mix(cs, 0x3000 + i as u64);
        let img = gen_normal_texture(class, s, h, w, c);
        let sample = make_synth_sample(&img, spec, mix(s, 0x11))?;
        test.push(TestSample {
            image: sample.corrupted,
            mask: sample.mask,
            anomalous: true,
        });
    }
    Ok(ClassCorpus {
        class,
        train,
        train_synth,
        test,
    })
}

// -------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub split: String,
    pub label: String,
    pub image_path: String,
    pub mask_path: String,
}

pub fn manifest_to_string(rows: &[ManifestRow]) -> String {
    let mut s = String::from("index,split,label,image-path,mask-path\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.split, r.label, r.image_path, r.mask_path
        ));
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("manifest line {} has {} fields, want 5", ln + 1, parts.len()),
            });
        }
        rows.push(ManifestRow {
            index: parts[0].parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                message: format!("bad index on line {}", ln + 1),
            })?,
            split: parts[1].to_string(),
            label: parts[2].to_string(),
            image_path: parts[3].to_string(),
            mask_path: parts[4].to_string(),
        });
    }
    Ok(rows)
}

/// Materialize the corpus for one class under `dir/<class>/`, writing
/// images and masks as tensor containers plus a manifest.
pub fn write_class(corpus: &ClassCorpus, dir: &Path) -> Result<PathBuf> {
    let class_dir = dir.join(corpus.class.name());
    let mut rows = Vec::new();
    let mut index = 0usize;
    for (i, img) in corpus.train.iter().enumerate() {
        let rel = format!("train/img_{i:04}.tns");
        io::save_tensor(&class_dir.join(&rel), img.tensor())?;
        rows.push(ManifestRow {
            index,
            split: "train".into(),
            label: "normal".into(),
            image_path: rel,
            mask_path: "-".into(),
        });
        index += 1;
    }
    for (i, sample) in corpus.test.iter().enumerate() {
        let rel = format!("test/img_{i:04}.tns");
        let mask_rel = format!("test/mask_{i:04}.tns");
        io::save_tensor(&class_dir.join(&rel), sample.image.tensor())?;
        io::save_tensor(&class_dir.join(&mask_rel), &sample.mask.to_tensor())?;
        rows.push(ManifestRow {
            index,
            split: "test".into(),
            label: if sample.anomalous { "anomalous" } else { "normal" }.into(),
            image_path: rel,
            mask_path: mask_rel,
        });
        index += 1;
    }
    io::atomic_write(
        &class_dir.join("manifest.csv"),
        manifest_to_string(&rows).as_bytes(),
    )?;
    Ok(class_dir)
}

/// Load a class corpus back from disk. Corrupted training counterparts are
/// re-derived from seeds, so a loaded corpus matches a generated one.
pub fn load_class(spec: &CorpusSpec, class_idx: usize, dir: &Path) -> Result<ClassCorpus> {
    let class = spec.classes[class_idx];
    let class_dir = dir.join(class.name());
    let manifest_path = class_dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let rows = parse_manifest(&text, &manifest_path)?;
    let cs = class_seed(spec.seed, class_idx);

    let mut train = Vec::new();
    let mut train_synth = Vec::new();
    let mut test = Vec::new();
    let mut train_i = 0usize;
    for row in rows {
        let img = Image::new(io::load_tensor(&class_dir.join(&row.image_path))?)?;
        match row.split.as_str() {
            "train" => {
                if row.label != "normal" {
                    return Err(Error::Contract {
                        message: format!("train split must be normal-only, row {} is {}", row.index, row.label),
                    });
                }
                let s = mix(cs, 0x1000 + train_i as u64);
                train_synth.push(make_synth_sample(&img, spec, mix(s, 0x11))?);
                train.push(img);
                train_i += 1;
            }
            "test" => {
                let mask = if row.mask_path == "-" {
                    Mask::zeros(img.height(), img.width())
                } else {
                    Mask::from_tensor(&io::load_tensor(&class_dir.join(&row.mask_path))?)?
                };
                test.push(TestSample {
                    image: img,
                    mask,
                    anomalous: row.label == "anomalous",
                });
            }
            other => {
                return Err(Error::Format {
                    path: manifest_path.display().to_string(),
                    message: format!("unknown split `{other}`"),
                })
            }
        }
    }
    Ok(ClassCorpus {
        class,
        train,
        train_synth,
        test,
    })
}

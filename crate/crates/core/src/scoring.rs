//! Inference-time anomaly maps from teacher-student discrepancy, plus the
//! diagnostic feature statistics (inter-class distances, residual
//! intensities).

use crate::error::{Error, Result};
use crate::kernels;
use crate::raa::{AdvanceMode, Bind, RaaParams};
use crate::rng;
use crate::student::{BottleneckParams, DecoderParams};
use crate::synth::Image;
use crate::tape::Tape;
use crate::teacher::{patches_to_features, EncoderWeights, FeaturePyramid};
use crate::tensor::Tensor;

/// Per-pixel discrepancy 1 - cos over channels; values in [0, 2].
pub fn discrepancy_map(f_a: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    if f_a.dims() != f_s.dims() || f_a.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "discrepancy_map".into(),
            expected: format!("{:?}", f_a.dims()),
            got: format!("{:?}", f_s.dims()),
        });
    }
    let (c, h, w) = (f_a.dims()[0], f_a.dims()[1], f_a.dims()[2]);
    let cos = kernels::cosine_map(f_a.data(), f_s.data(), c, h * w);
    Tensor::new(vec![h, w], cos.iter().map(|&v| 1.0 - v).collect())
}

/// Separable Gaussian blur; taps within radius 3 sigma, renormalized at the
/// borders so constant maps stay constant.
pub fn gaussian_smooth(map: &Tensor, sigma: f32) -> Result<Tensor> {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f32], len_outer: usize, len_inner: usize, stride_outer: usize, stride_inner: usize| {
        let mut dst = vec![0.0f32; src.len()];
        for o in 0..len_outer {
            for i in 0..len_inner {
                let mut acc = 0.0f32;
                let mut norm = 0.0f32;
                for (t, &wv) in weights.iter().enumerate() {
                    let j = i as isize + t as isize - radius;
                    if j < 0 || j >= len_inner as isize {
                        continue;
                    }
                    acc += wv * src[o * stride_outer + j as usize * stride_inner];
                    norm += wv;
                }
                dst[o * stride_outer + i * stride_inner] = acc / norm;
            }
        }
        dst
    };
    let horiz = pass(map.data(), h, w, w, 1);
    let both = pass(&horiz, w, h, 1, w);
    Tensor::new(vec![h, w], both)
}

/// Sum of bilinearly upsampled level maps, optionally Gaussian smoothed.
pub fn aggregate_map(levels: &[Tensor], h: usize, w: usize, smoothing: Option<f32>) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::EmptyInput {
            context: "aggregate_map".into(),
        });
    }
    let mut acc = vec![0.0f32; h * w];
    for level in levels {
        let (lh, lw) = (level.dims()[0], level.dims()[1]);
        let up = kernels::bilinear_upsample(level.data(), 1, lh, lw, h, w);
        for (a, v) in acc.iter_mut().zip(up) {
            *a += v;
        }
    }
    let summed = Tensor::new(vec![h, w], acc)?;
    match smoothing {
        Some(sigma) => gaussian_smooth(&summed, sigma),
        None => Ok(summed),
    }
}

/// Image-level score: exact maximum of the map.
pub fn image_score(map: &Tensor) -> f32 {
    map.max_value()
}

/// Seeded row subsample of at most `cap` rows from an n×c matrix.
fn subsample_rows(x: &Tensor, cap: usize, seed: u64) -> Tensor {
    let (n, c) = (x.dims()[0], x.dims()[1]);
    if n <= cap {
        return x.clone();
    }
    let perm = rng::permutation(n, seed);
    let mut data = Vec::with_capacity(cap * c);
    let mut picked: Vec<usize> = perm[..cap].to_vec();
    picked.sort_unstable();
    for &r in &picked {
        data.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
    }
    Tensor::new(vec![cap, c], data).expect("subsample dims")
}

pub const INTERCLASS_SUBSAMPLE_CAP: usize = 512;

/// Mean cross-pair cosine distance (1 - cos) between two patch sets,
/// estimated on seeded subsamples of at most 512 rows each.
pub fn interclass_distance(normal: &Tensor, abnormal: &Tensor, seed: u64) -> Result<f64> {
    if normal.dims().len() != 2 || abnormal.dims().len() != 2 {
        return Err(Error::InvalidArgument {
            context: "interclass_distance expects n×c matrices".into(),
        });
    }
    let n = subsample_rows(normal, INTERCLASS_SUBSAMPLE_CAP, rng::mix(seed, 1));
    let a = subsample_rows(abnormal, INTERCLASS_SUBSAMPLE_CAP, rng::mix(seed, 2));
    let (nn, c) = (n.dims()[0], n.dims()[1]);
    let na = a.dims()[0];
    let sims = kernels::cosine_pairs(a.data(), n.data(), na, nn, c);
    let total: f64 = sims.iter().map(|&s| 1.0 - s as f64).sum();
    Ok(total / (na * nn) as f64)
}

/// Mean squared residual entry, the paper-style residual-noise intensity.
pub fn residual_intensity(deltas: &Tensor) -> f64 {
    let total: f64 = deltas.data().iter().map(|&d| (d as f64) * (d as f64)).sum();
    total / deltas.len() as f64
}

// ------------------------------------------------------------- inference

/// Frozen end-to-end scoring model. `raa` is None for the plain
/// reverse-distillation ablation.
pub struct InferenceModel {
    pub teacher: EncoderWeights,
    pub raa: Option<RaaParams>,
    pub bottleneck: BottleneckParams,
    pub decoder: DecoderParams,
    pub smoothing: Option<f32>,
}

impl InferenceModel {
    /// Advanced-teacher pyramid for an image (vanilla when RAA is absent).
    pub fn advanced_pyramid(&self, image: &Image) -> Result<FeaturePyramid> {
        let pyr = self.teacher.encode(image)?;
        match &self.raa {
            None => Ok(pyr),
            Some(raa) => {
                let mut tape = Tape::new();
                let mut levels = Vec::with_capacity(pyr.levels.len());
                for (k, level) in pyr.levels.iter().enumerate() {
                    let out = raa.levels[k].advance(&mut tape, k, level, AdvanceMode::Inference, Bind::Frozen)?;
                    let dims = level.dims();
                    levels.push(patches_to_features(tape.value(out.f_a), dims[1], dims[2]));
                }
                Ok(FeaturePyramid { levels })
            }
        }
    }

    /// Student reconstruction of an advanced pyramid.
    pub fn reconstruct(&self, advanced: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut tape = Tape::new();
        let nodes: Vec<_> = advanced
            .levels
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<_>>()?;
        let emb = self.bottleneck.forward(&mut tape, &nodes, Bind::Frozen)?;
        let decoded = self.decoder.forward(&mut tape, emb, Bind::Frozen)?;
        Ok(FeaturePyramid {
            levels: decoded.iter().map(|&id| tape.value(id).clone()).collect(),
        })
    }

    /// Full-resolution anomaly map and its image-level score.
    pub fn score_image(&self, image: &Image) -> Result<(Tensor, f32)> {
        let advanced = self.advanced_pyramid(image)?;
        let student = self.reconstruct(&advanced)?;
        let maps: Vec<Tensor> = advanced
            .levels
            .iter()
            .zip(&student.levels)
            .map(|(a, s)| discrepancy_map(a, s))
            .collect::<Result<_>>()?;
        let map = aggregate_map(&maps, image.height(), image.width(), self.smoothing)?;
        let score = image_score(&map);
        Ok((map, score))
    }
}

// ----------------------------------------------------------- diagnostics

/// Feature-space statistics over a labeled test split: per-level
/// inter-class distances for the vanilla and advanced teacher, and the
/// intensity of the applied residual noise (the gated residual w·Δ that
/// actually perturbs the features) on normal vs anomalous patches.
#[derive(Clone, Debug)]
pub struct DiagReport {
    pub vanilla_ic: Vec<f64>,
    pub advanced_ic: Vec<f64>,
    pub residual_normal: f64,
    pub residual_anomalous: f64,
}

impl DiagReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("level,vanilla_ic,advanced_ic,residual_normal,residual_anomalous\n");
        for k in 0..self.vanilla_ic.len() {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                k, self.vanilla_ic[k], self.advanced_ic[k], self.residual_normal, self.residual_anomalous
            ));
        }
        s
    }
}

/// Pool per-level patch sets over a test split (partitioned by the GT
/// masks) and measure the class separation and residual intensities.
pub fn diagnose(
    teacher: &EncoderWeights,
    raa: Option<&RaaParams>,
    test: &[crate::synth::TestSample],
    seed: u64,
) -> Result<DiagReport> {
    use crate::teacher::{features_to_patches, subsample_mask};
    let k_levels = teacher.config().k_levels();
    let mut van_n: Vec<Vec<f32>> = vec![Vec::new(); k_levels];
    let mut van_a: Vec<Vec<f32>> = vec![Vec::new(); k_levels];
    let mut adv_n: Vec<Vec<f32>> = vec![Vec::new(); k_levels];
    let mut adv_a: Vec<Vec<f32>> = vec![Vec::new(); k_levels];
    let mut delta_n_sq = 0.0f64;
    let mut delta_n_count = 0usize;
    let mut delta_a_sq = 0.0f64;
    let mut delta_a_count = 0usize;
    let mut channels = vec![0usize; k_levels];

    for sample in test {
        let pyr = teacher.encode(&sample.image)?;
        for (k, level) in pyr.levels.iter().enumerate() {
            let c = level.dims()[0];
            channels[k] = c;
            let mask_k = subsample_mask(&sample.mask, k);
            let van_patches = features_to_patches(level);
            let (adv_patches, delta) = match raa {
                Some(raa) => {
                    let mut tape = Tape::new();
                    let out = raa.levels[k].advance(&mut tape, k, level, AdvanceMode::Inference, Bind::Frozen)?;
                    let gated = tape.scale_rows(out.delta, out.gate)?;
                    (
                        tape.value(out.f_a).clone(),
                        Some(tape.value(gated).clone()),
                    )
                }
                None => (van_patches.clone(), None),
            };
            for (p, &bit) in mask_k.data().iter().enumerate() {
                let row = &van_patches.data()[p * c..(p + 1) * c];
                let adv_row = &adv_patches.data()[p * c..(p + 1) * c];
                if bit == 1 {
                    van_a[k].extend_from_slice(row);
                    adv_a[k].extend_from_slice(adv_row);
                } else {
                    van_n[k].extend_from_slice(row);
                    adv_n[k].extend_from_slice(adv_row);
                }
                if let Some(d) = &delta {
                    let drow = &d.data()[p * c..(p + 1) * c];
                    let sq: f64 = drow.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    if bit == 1 {
                        delta_a_sq += sq;
                        delta_a_count += c;
                    } else {
                        delta_n_sq += sq;
                        delta_n_count += c;
                    }
                }
            }
        }
    }

    let mut vanilla_ic = Vec::with_capacity(k_levels);
    let mut advanced_ic = Vec::with_capacity(k_levels);
    for k in 0..k_levels {
        let c = channels[k];
        if van_a[k].is_empty() || van_n[k].is_empty() {
            return Err(Error::EmptyInput {
                context: format!("diagnose: level {k} has an empty patch class"),
            });
        }
        let to_mat = |v: &Vec<f32>| Tensor::new(vec![v.len() / c, c], v.clone());
        vanilla_ic.push(interclass_distance(
            &to_mat(&van_n[k])?,
            &to_mat(&van_a[k])?,
            rng::mix(seed, k as u64),
        )?);
        advanced_ic.push(interclass_distance(
            &to_mat(&adv_n[k])?,
            &to_mat(&adv_a[k])?,
            rng::mix(seed, k as u64),
        )?);
    }
    Ok(DiagReport {
        vanilla_ic,
        advanced_ic,
        residual_normal: if delta_n_count > 0 {
            delta_n_sq / delta_n_count as f64
        } else {
            0.0
        },
        residual_anomalous: if delta_a_count > 0 {
            delta_a_sq / delta_a_count as f64
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn discrepancy_zero_for_identical_and_two_for_antipodal() {
        let f = gaussian(vec![4, 3, 3], 1.0, 5);
        let d = discrepancy_map(&f, &f).unwrap();
        assert!(d.data().iter().all(|&v| v.abs() < 1e-6));

        let mut neg = f.clone();
        for v in neg.data_mut() {
            *v = -*v;
        }
        let d = discrepancy_map(&f, &neg).unwrap();
        assert!(d.data().iter().all(|&v| (v - 2.0).abs() < 1e-5));
        assert!(discrepancy_map(&f, &gaussian(vec![4, 2, 2], 1.0, 6)).is_err());
    }

    #[test]
    fn discrepancy_matches_per_pixel_loop() {
        let a = gaussian(vec![5, 8, 8], 1.0, 7);
        let b = gaussian(vec![5, 8, 8], 1.0, 8);
        let d = discrepancy_map(&a, &b).unwrap();
        for p in 0..64 {
            let av: Vec<f32> = (0..5).map(|c| a.data()[c * 64 + p]).collect();
            let bv: Vec<f32> = (0..5).map(|c| b.data()[c * 64 + p]).collect();
            let want = 1.0 - kernels::cosine(&av, &bv);
            assert!((d.data()[p] - want).abs() < 1e-6);
            assert!((0.0..=2.0 + 1e-6).contains(&d.data()[p]));
        }
    }

    #[test]
    fn aggregate_constant_levels_and_passthrough() {
        let zero = Tensor::zeros(vec![4, 4]);
        let agg = aggregate_map(&[zero.clone(), zero.clone(), zero], 8, 8, None).unwrap();
        assert!(agg.data().iter().all(|&v| v == 0.0));

        let c1 = Tensor::full(vec![4, 4], 0.25);
        let c2 = Tensor::full(vec![2, 2], 0.5);
        let agg = aggregate_map(&[c1, c2], 8, 8, None).unwrap();
        assert!(agg.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));

        let single = gaussian(vec![4, 4], 1.0, 9);
        let agg = aggregate_map(&[single.clone()], 4, 4, None).unwrap();
        assert_eq!(agg, single);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let c = Tensor::full(vec![16, 16], 0.3);
        let s = gaussian_smooth(&c, 4.0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.3).abs() < 1e-5));
        // smoothing shrinks a spike
        let mut spike = Tensor::zeros(vec![16, 16]);
        spike.data_mut()[8 * 16 + 8] = 1.0;
        let s = gaussian_smooth(&spike, 4.0).unwrap();
        assert!(s.max_value() < 0.05);
    }

    #[test]
    fn image_score_is_exact_max() {
        let mut m = Tensor::full(vec![3, 3], 0.1);
        assert!((image_score(&m) - 0.1).abs() < 1e-7);
        m.data_mut()[4] = 0.9;
        assert_eq!(image_score(&m), 0.9);
        let scan = m.data().iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(image_score(&m), scan);
    }

    #[test]
    fn interclass_distance_cases() {
        // orthogonal one-hot sets across classes: distance 1
        let normal = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let abnormal = Tensor::new(vec![2, 4], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = interclass_distance(&normal, &abnormal, 0).unwrap();
        assert!((d - 1.0).abs() < 1e-6);
        // substitution: same set on both sides equals the estimator's
        // intra-set value by definition
        let set = gaussian(vec![20, 8], 1.0, 2);
        let a = interclass_distance(&set, &set, 3).unwrap();
        let b = interclass_distance(&set, &set, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_intensity_closed_forms() {
        assert_eq!(residual_intensity(&Tensor::zeros(vec![3, 4])), 0.0);
        assert_eq!(residual_intensity(&Tensor::full(vec![5, 7], 1.0)), 1.0);
        let d = gaussian(vec![3, 4], 1.0, 11);
        let mut acc = 0.0f64;
        for i in 0..3 {
            for j in 0..4 {
                let v = d.data()[i * 4 + j] as f64;
                acc += v * v;
            }
        }
        assert!((residual_intensity(&d) - acc / 12.0).abs() < 1e-9);
    }

    #[test]
    fn anomaly_map_is_scale_invariant_per_pixel_vector() {
        let a = gaussian(vec![4, 4, 4], 1.0, 21);
        let s = gaussian(vec![4, 4, 4], 1.0, 22);
        let base = discrepancy_map(&a, &s).unwrap();
        let mut scaled = a.clone();
        for c in 0..4 {
            scaled.data_mut()[c * 16 + 5] *= 42.0;
        }
        let moved = discrepancy_map(&scaled, &s).unwrap();
        for (x, y) in base.data().iter().zip(moved.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

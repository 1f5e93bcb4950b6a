//! Evaluation: image/pixel AUROC and the per-region-overlap (PRO) metric.

use crate::error::{Error, Result};
use crate::scoring::InferenceModel;
use crate::synth::{Mask, TestSample};
use crate::tensor::Tensor;

/// Rank-statistic AUROC with half credit for ties; exactly the
/// Mann-Whitney pair statistic (concordant + 0.5*ties) / (P*N).
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "auroc".into(),
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyInput {
            context: "auroc needs both classes".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// AUROC over the pooled pixel population of all (map, mask) pairs.
pub fn pixel_auroc(maps: &[Tensor], gts: &[Mask]) -> Result<f64> {
    if maps.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            context: "pixel_auroc".into(),
            expected: format!("{} masks", maps.len()),
            got: format!("{}", gts.len()),
        });
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, gt) in maps.iter().zip(gts) {
        if map.dims() != [gt.height(), gt.width()] {
            return Err(Error::ShapeMismatch {
                context: "pixel_auroc pair".into(),
                expected: format!("{}x{}", gt.height(), gt.width()),
                got: format!("{:?}", map.dims()),
            });
        }
        scores.extend_from_slice(map.data());
        labels.extend(gt.data().iter().map(|&b| b == 1));
    }
    auroc(&scores, &labels)
}

/// 4-connected component labels of a binary mask. Background cells get
/// label 0; regions are numbered from 1 in scan order.
pub fn label_regions(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push(start);
        while let Some(p) = queue.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data()[q] == 1 && labels[q] == 0 {
                    labels[q] = next;
                    queue.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    (labels, next as usize)
}

/// Per-region-overlap score: sweep every distinct map value as a threshold
/// (prediction = map >= t), plot mean per-region recall against global
/// false-positive rate, and integrate the curve up to `fpr_limit`
/// (trapezoidal), normalized by the limit.
pub fn pro(maps: &[Tensor], gts: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_limit) || fpr_limit == 0.0 {
        return Err(Error::InvalidArgument {
            context: format!("fpr limit must lie in (0,1], got {fpr_limit}"),
        });
    }
    if maps.len() != gts.len() || maps.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "pro".into(),
            expected: format!("{} masks, nonempty", maps.len()),
            got: format!("{}", gts.len()),
        });
    }
    // global region ids and pixel records
    struct Pixel {
        score: f32,
        region: u32, // 0 = normal pixel
    }
    let mut pixels: Vec<Pixel> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new(); // indexed by global id - 1
    let mut n_normal = 0usize;
    for (map, gt) in maps.iter().zip(gts) {
        if map.dims() != [gt.height(), gt.width()] {
            return Err(Error::ShapeMismatch {
                context: "pro pair".into(),
                expected: format!("{}x{}", gt.height(), gt.width()),
                got: format!("{:?}", map.dims()),
            });
        }
        let (labels, count) = label_regions(gt);
        let base = region_sizes.len() as u32;
        region_sizes.extend(std::iter::repeat(0).take(count));
        for (p, &l) in labels.iter().enumerate() {
            let region = if l == 0 { 0 } else { base + l };
            if region == 0 {
                n_normal += 1;
            } else {
                region_sizes[(region - 1) as usize] += 1;
            }
            pixels.push(Pixel {
                score: map.data()[p],
                region,
            });
        }
    }
    let n_regions = region_sizes.len();
    if n_regions == 0 {
        return Err(Error::EmptyInput {
            context: "pro needs at least one ground-truth region".into(),
        });
    }
    if n_normal == 0 {
        return Err(Error::EmptyInput {
            context: "pro needs at least one normal pixel".into(),
        });
    }

    pixels.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    // sweep descending thresholds, recording (fpr, mean overlap) after each
    // distinct value
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut overlap_sum = 0.0f64; // sum over regions of hit/size
    let mut i = 0usize;
    while i < pixels.len() {
        let v = pixels[i].score;
        while i < pixels.len() && pixels[i].score == v {
            let px = &pixels[i];
            if px.region == 0 {
                fp += 1;
            } else {
                overlap_sum += 1.0 / region_sizes[(px.region - 1) as usize] as f64;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_normal as f64, overlap_sum / n_regions as f64));
    }

    // integrate up to the limit
    let mut area = 0.0f64;
    for win in curve.windows(2) {
        let (f0, o0) = win[0];
        let (f1, o1) = win[1];
        if f1 <= fpr_limit {
            area += (f1 - f0) * (o0 + o1) / 2.0;
        } else {
            if f0 < fpr_limit {
                let o_at = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0);
                area += (fpr_limit - f0) * (o0 + o_at) / 2.0;
            }
            break;
        }
    }
    Ok(area / fpr_limit)
}

/// One evaluation over a labeled test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub i_auc: f64,
    pub p_auc: f64,
    pub pro: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub config_hash: u64,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "class,i_auc,p_auc,pro,n_normal,n_abnormal,config_hash"
    }

    pub fn csv_row(&self, class: &str) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{:016x}",
            class, self.i_auc, self.p_auc, self.pro, self.n_normal, self.n_abnormal, self.config_hash
        )
    }
}

/// Score every test image with the frozen model and compute the metric
/// triple.
pub fn evaluate(
    model: &InferenceModel,
    test: &[TestSample],
    fpr_limit: f64,
    config_hash: u64,
) -> Result<EvalReport> {
    let mut maps = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut gts = Vec::with_capacity(test.len());
    for sample in test {
        let (map, score) = model.score_image(&sample.image)?;
        maps.push(map);
        scores.push(score);
        labels.push(sample.anomalous);
        gts.push(sample.mask.clone());
    }
    report_from_maps(&maps, &scores, &labels, &gts, fpr_limit, config_hash)
}

/// Metric triple from precomputed maps and scores.
pub fn report_from_maps(
    maps: &[Tensor],
    scores: &[f32],
    labels: &[bool],
    gts: &[Mask],
    fpr_limit: f64,
    config_hash: u64,
) -> Result<EvalReport> {
    let i_auc = auroc(scores, labels)?;
    let p_auc = pixel_auroc(maps, gts)?;
    let pro_v = pro(maps, gts, fpr_limit)?;
    let n_abnormal = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        i_auc,
        p_auc,
        pro: pro_v,
        n_normal: labels.len() - n_abnormal,
        n_abnormal,
        config_hash,
    })
}

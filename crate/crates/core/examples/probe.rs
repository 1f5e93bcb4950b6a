// dev probe: diagnose detection quality knobs (deleted before release)
use std::time::Instant;

use aand_core::config::Config;
use aand_core::metrics;
use aand_core::raa::{AdvanceMode, Bind};
use aand_core::scoring::{diagnose, InferenceModel};
use aand_core::synth::generate_class;
use aand_core::tape::Tape;
use aand_core::teacher::{subsample_mask, EncoderWeights};
use aand_core::trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let class_idx: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let s1_epochs: u32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let s2_epochs: u32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(40);
    let train_n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);

    let s1_batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let mem_len: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(50);
    let img: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(64);
    let gamma: f32 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let mask_frac: f32 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let mut cfg = Config::toy();
    cfg.train_per_class = train_n;
    cfg.test_normal_per_class = 16;
    cfg.test_anomalous_per_class = 16;
    cfg.stage1_epochs = s1_epochs;
    cfg.stage2_epochs = s2_epochs;
    cfg.batch_size = 8;
    cfg.mem_len = mem_len;
    cfg.image_size = img;
    cfg.gamma = gamma;
    cfg.min_mask_frac = mask_frac;
    cfg.seed = 0;

    let corpus = generate_class(&cfg.corpus_spec(), class_idx).unwrap();
    let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());

    let mut s1_cfg = cfg.clone();
    s1_cfg.batch_size = s1_batch;
    let cfg_for_s1 = s1_cfg;
    let t1 = Instant::now();
    let s1 = trainer::train_stage1(&corpus, &teacher, &cfg_for_s1, None).unwrap();
    if let (Some(first), Some(last)) = (s1.losses.first(), s1.losses.last()) {
        println!(
            "s1 {:?}  loss {:.4} -> {:.4} (focal {:.4} la {:.4})",
            t1.elapsed(), first.total, last.total, last.focal, last.la
        );
        for row in s1.losses.iter().step_by(10) {
            println!("    epoch {:3}: focal {:.4} la {:+.4}", row.epoch, row.focal, row.la);
        }
    }

    // gate separation on test images
    for k in 0..3 {
        let mut gate_n = (0.0f64, 0usize);
        let mut gate_a = (0.0f64, 0usize);
        let mut gmin = f32::MAX;
        let mut gmax = f32::MIN;
        for sample in &corpus.test {
            let pyr = teacher.encode(&sample.image).unwrap();
            let mask_k = subsample_mask(&sample.mask, k);
            let mut tape = Tape::new();
            let out = s1.raa.levels[k]
                .advance(&mut tape, k, &pyr.levels[k], AdvanceMode::Inference, Bind::Frozen)
                .unwrap();
            let gates = tape.value(out.gate);
            for (p, &bit) in mask_k.data().iter().enumerate() {
                gmin = gmin.min(gates.data()[p]);
                gmax = gmax.max(gates.data()[p]);
                if bit == 1 {
                    gate_a.0 += gates.data()[p] as f64;
                    gate_a.1 += 1;
                } else {
                    gate_n.0 += gates.data()[p] as f64;
                    gate_n.1 += 1;
                }
            }
        }
        println!(
            "  gate level {k}: normal {:.4} anomalous {:.4} range [{:.4}, {:.4}] (anom cells {:.1}%)",
            gate_n.0 / gate_n.1 as f64,
            gate_a.0 / gate_a.1 as f64,
            gmin, gmax,
            100.0 * gate_a.1 as f64 / (gate_a.1 + gate_n.1) as f64
        );
    }

    let t2 = Instant::now();
    let s2 = trainer::train_stage2(&corpus, &teacher, Some(&s1.raa), &cfg, None).unwrap();
    println!(
        "s2 {:?}  loss {:.4} -> {:.4}",
        t2.elapsed(),
        s2.losses.first().unwrap().total,
        s2.losses.last().unwrap().total
    );

    for smoothing in [None, Some(4.0f32)] {
        let model = InferenceModel {
            teacher: teacher.clone(),
            raa: Some(s1.raa.clone()),
            bottleneck: s2.bottleneck.clone(),
            decoder: s2.decoder.clone(),
            smoothing,
        };
        // discrepancy statistics on test pixels
        let mut d_norm = (0.0f64, 0usize);
        let mut d_anom = (0.0f64, 0usize);
        let mut scores_n = Vec::new();
        let mut scores_a = Vec::new();
        for sample in &corpus.test {
            let (map, score) = model.score_image(&sample.image).unwrap();
            for (p, &bit) in sample.mask.data().iter().enumerate() {
                if bit == 1 {
                    d_anom.0 += map.data()[p] as f64;
                    d_anom.1 += 1;
                } else {
                    d_norm.0 += map.data()[p] as f64;
                    d_norm.1 += 1;
                }
            }
            if sample.anomalous {
                scores_a.push(score);
            } else {
                scores_n.push(score);
            }
        }
        let report = metrics::evaluate(&model, &corpus.test, 0.3, 0).unwrap();
        println!(
            "smooth={:?}: i_auc={:.4} p_auc={:.4} pro={:.4} | pix d: n={:.4} a={:.4} | scores n {:.3}..{:.3} a {:.3}..{:.3}",
            smoothing,
            report.i_auc,
            report.p_auc,
            report.pro,
            d_norm.0 / d_norm.1 as f64,
            d_anom.0 / d_anom.1 as f64,
            scores_n.iter().cloned().fold(f32::MAX, f32::min),
            scores_n.iter().cloned().fold(f32::MIN, f32::max),
            scores_a.iter().cloned().fold(f32::MAX, f32::min),
            scores_a.iter().cloned().fold(f32::MIN, f32::max),
        );
    }

    let diag = diagnose(&teacher, Some(&s1.raa), &corpus.test, 7).unwrap();
    println!(
        "IC vanilla {:?} -> advanced {:?} | residual n={:.3e} a={:.3e}",
        diag.vanilla_ic, diag.advanced_ic, diag.residual_normal, diag.residual_anomalous
    );
}

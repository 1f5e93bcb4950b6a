//! Two-stage training: stage 1 optimizes only the amplification module on
//! corrupted samples; stage 2 freezes teacher + RAA and distills the
//! advanced features into the bottleneck/decoder pair on normal samples.
//!
//! Every stochastic choice derives from (root seed, epoch, index), so full
//! runs, reruns and resumed runs are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::adam::AdamState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io;
use crate::losses;
use crate::raa::{Bind, RaaParams};
use crate::rng;
use crate::scoring::InferenceModel;
use crate::student::{hash_named, BottleneckParams, DecoderParams};
use crate::synth::{ClassCorpus, Image};
use crate::tape::{Gradients, NodeId, Tape};
use crate::teacher::{
    features_to_patches, partition_patches, subsample_mask, EncoderWeights, FeaturePyramid,
};
use crate::tensor::Tensor;

// ------------------------------------------------------------- loss rows

/// One epoch's mean loss components; inapplicable columns hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: u32,
    pub stage: u8,
    pub total: f64,
    pub focal: f64,
    pub la: f64,
    pub kd: f64,
    pub hkd: f64,
}

impl EpochLoss {
    pub fn csv_header() -> &'static str {
        "epoch,stage,loss_total,loss_focal,loss_A,loss_KD,loss_HKD"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.stage, self.total, self.focal, self.la, self.kd, self.hkd
        )
    }
}

pub fn write_loss_csv(path: &Path, rows: &[EpochLoss]) -> Result<()> {
    let mut text = String::from(EpochLoss::csv_header());
    text.push('\n');
    for r in rows {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    io::atomic_write(path, text.as_bytes())
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.mul_scalar(total, 1.0 / terms.len() as f32)
}

/// Adam step over named parameters, gradients looked up by leaf name.
fn apply_updates(
    opt: &mut AdamState,
    params: Vec<(String, &mut Tensor)>,
    grads: &Gradients,
    lr: f32,
) -> Result<()> {
    let mut updates: Vec<(String, &mut Tensor, Tensor)> = params
        .into_iter()
        .map(|(name, p)| {
            let g = grads.by_name(&name).expect("every parameter is a tape leaf");
            (name, p, g)
        })
        .collect();
    updates.sort_by(|a, b| a.0.cmp(&b.0));
    opt.step(updates, lr)
}

// --------------------------------------------------------------- stage 1

struct Stage1Level {
    patches: Tensor,
    gt_bits: Vec<f32>,
    normal: Option<Tensor>,
    abnormal: Option<Tensor>,
    abnormal_flat_idx: Vec<usize>,
}

struct Stage1Sample {
    levels: Vec<Stage1Level>,
}

fn stage1_cache(corpus: &ClassCorpus, teacher: &EncoderWeights) -> Result<Vec<Stage1Sample>> {
    let mut out = Vec::with_capacity(corpus.train_synth.len());
    for sample in &corpus.train_synth {
        let pyramid = teacher.encode(&sample.corrupted)?;
        let mut levels = Vec::with_capacity(pyramid.levels.len());
        for (k, level) in pyramid.levels.iter().enumerate() {
            let mask_k = subsample_mask(&sample.mask, k);
            let part = partition_patches(level, &mask_k)?;
            let c = part.c;
            let mut flat = Vec::with_capacity(part.abnormal_idx.len() * c);
            for &p in &part.abnormal_idx {
                flat.extend(p * c..(p + 1) * c);
            }
            levels.push(Stage1Level {
                patches: features_to_patches(level),
                gt_bits: mask_k.data().iter().map(|&b| b as f32).collect(),
                normal: part.normal,
                abnormal: part.abnormal,
                abnormal_flat_idx: flat,
            });
        }
        out.push(Stage1Sample { levels });
    }
    Ok(out)
}

fn pe_for_levels(cfg: &Config) -> Result<Vec<Tensor>> {
    let dims = cfg
        .encoder_config()
        .level_dims(cfg.image_size, cfg.image_size);
    dims.iter()
        .map(|d| crate::raa::position_encoding(d[0], d[1], d[2]))
        .collect()
}

pub struct Stage1Run {
    pub raa: RaaParams,
    pub opt: AdamState,
    pub losses: Vec<EpochLoss>,
}

/// Optimize the RAA module on corrupted samples. `resume` continues from
/// (params, optimizer, next epoch). The teacher is hash-checked frozen.
pub fn train_stage1(
    corpus: &ClassCorpus,
    teacher: &EncoderWeights,
    cfg: &Config,
    resume: Option<(RaaParams, AdamState, u32)>,
) -> Result<Stage1Run> {
    if corpus.train_synth.is_empty() {
        return Err(Error::EmptyInput {
            context: "stage-1 corpus has no corrupted samples".into(),
        });
    }
    let teacher_hash = teacher.hash();
    let pe_table = pe_for_levels(cfg)?;
    let cache = stage1_cache(corpus, teacher)?;
    let (mut raa, mut opt, start_epoch) = match resume {
        Some((r, o, e)) => (r, o, e),
        None => (
            RaaParams::init(&cfg.enc_channels, cfg.mem_len, cfg.raa_seed(), cfg.phi2_zero_init),
            AdamState::new(),
            0,
        ),
    };
    let agg = cfg.level_agg;
    let mut rows = Vec::new();

    for epoch in start_epoch..cfg.stage1_epochs {
        let perm = rng::permutation(cache.len(), rng::mix(rng::mix(cfg.seed, 0x51), epoch as u64));
        let mut sum_focal = 0.0f64;
        let mut sum_la = 0.0f64;
        for batch in perm.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut sample_losses = Vec::with_capacity(batch.len());
            for &si in batch {
                let sample = &cache[si];
                let mut focal_terms = Vec::new();
                let mut la_terms: Vec<NodeId> = Vec::new();
                for (k, lvl) in sample.levels.iter().enumerate() {
                    let out = raa.levels[k].advance_patches(
                        &mut tape,
                        k,
                        &lvl.patches,
                        &pe_table[k],
                        Some(&lvl.gt_bits),
                        Bind::Train,
                    )?;
                    focal_terms.push(losses::focal_loss(&mut tape, out.gate, &lvl.gt_bits, cfg.gamma)?);
                    match (&lvl.abnormal, &lvl.normal) {
                        (Some(ab), Some(no)) => {
                            let s_ref = losses::margin_matrix(ab, no, cfg.alpha)?;
                            let picked = tape.gather(out.f_a, lvl.abnormal_flat_idx.clone())?;
                            let f_a_ab = tape.reshape(picked, vec![ab.dims()[0], ab.dims()[1]])?;
                            la_terms.push(losses::anomaly_amplification_loss(
                                &mut tape, f_a_ab, no, &s_ref,
                            )?);
                        }
                        _ => {
                            log::warn!(
                                "sample {si} level {k}: no supervision pairs, skipping amplification loss"
                            );
                        }
                    }
                }
                let focal_total = losses::agg_levels(&mut tape, focal_terms, agg)?;
                sum_focal += tape.value(focal_total).item() as f64;
                let total = if la_terms.is_empty() {
                    focal_total
                } else {
                    let la_total = losses::agg_levels(&mut tape, la_terms, agg)?;
                    sum_la += tape.value(la_total).item() as f64;
                    tape.add(focal_total, la_total)?
                };
                sample_losses.push(total);
            }
            let batch_loss = mean_of(&mut tape, &sample_losses)?;
            let grads = tape.backward(batch_loss)?;
            apply_updates(&mut opt, raa.tensors_mut(), &grads, cfg.lr)?;
        }
        let n = cache.len() as f64;
        let focal = sum_focal / n;
        let la = sum_la / n;
        rows.push(EpochLoss {
            epoch,
            stage: 1,
            total: focal + la,
            focal,
            la,
            kd: 0.0,
            hkd: 0.0,
        });
    }

    if teacher.hash() != teacher_hash {
        return Err(Error::Contract {
            message: "teacher weights changed during stage 1".into(),
        });
    }
    Ok(Stage1Run {
        raa,
        opt,
        losses: rows,
    })
}

// --------------------------------------------------------------- stage 2

/// Advanced-teacher pyramids for a set of images; vanilla when `raa` is
/// absent. Everything here is frozen, so stage 2 caches the result.
pub fn advanced_pyramids(
    teacher: &EncoderWeights,
    raa: Option<&RaaParams>,
    images: &[Image],
) -> Result<Vec<FeaturePyramid>> {
    use crate::raa::AdvanceMode;
    use crate::teacher::patches_to_features;
    images
        .iter()
        .map(|img| {
            let pyr = teacher.encode(img)?;
            match raa {
                None => Ok(pyr),
                Some(raa) => {
                    let mut tape = Tape::new();
                    let mut levels = Vec::with_capacity(pyr.levels.len());
                    for (k, level) in pyr.levels.iter().enumerate() {
                        let out = raa.levels[k].advance(
                            &mut tape,
                            k,
                            level,
                            AdvanceMode::Inference,
                            Bind::Frozen,
                        )?;
                        let d = level.dims();
                        levels.push(patches_to_features(tape.value(out.f_a), d[1], d[2]));
                    }
                    Ok(FeaturePyramid { levels })
                }
            }
        })
        .collect()
}

pub struct Stage2Run {
    pub bottleneck: BottleneckParams,
    pub decoder: DecoderParams,
    pub opt: AdamState,
    pub losses: Vec<EpochLoss>,
}

/// Distill the frozen advanced teacher into bottleneck + decoder on normal
/// training images only.
pub fn train_stage2(
    corpus: &ClassCorpus,
    teacher: &EncoderWeights,
    raa: Option<&RaaParams>,
    cfg: &Config,
    resume: Option<(BottleneckParams, DecoderParams, AdamState, u32)>,
) -> Result<Stage2Run> {
    if corpus.train.is_empty() {
        return Err(Error::EmptyInput {
            context: "stage-2 corpus has no normal samples".into(),
        });
    }
    let teacher_hash = teacher.hash();
    let raa_hash = raa.map(|r| r.hash());
    let pyramids = advanced_pyramids(teacher, raa, &corpus.train)?;

    let (mut bn, mut dec, mut opt, start_epoch) = match resume {
        Some((b, d, o, e)) => (b, d, o, e),
        None => (
            BottleneckParams::init(&cfg.enc_channels, rng::mix(cfg.student_seed(), 0xB)),
            DecoderParams::init(&cfg.enc_channels, rng::mix(cfg.student_seed(), 0xD)),
            AdamState::new(),
            0,
        ),
    };
    let mut rows = Vec::new();

    for epoch in start_epoch..cfg.stage2_epochs {
        let perm = rng::permutation(pyramids.len(), rng::mix(rng::mix(cfg.seed, 0x52), epoch as u64));
        let mut sum_kd = 0.0f64;
        let mut sum_hkd = 0.0f64;
        for batch in perm.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut sample_losses = Vec::with_capacity(batch.len());
            for &si in batch {
                let f_a: Vec<NodeId> = pyramids[si]
                    .levels
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect::<Result<_>>()?;
                let emb = bn.forward(&mut tape, &f_a, Bind::Train)?;
                let f_s = dec.forward(&mut tape, emb, Bind::Train)?;
                let kd = losses::kd_loss(&mut tape, &f_a, &f_s, cfg.level_agg)?;
                sum_kd += tape.value(kd).item() as f64;
                let hkd = if cfg.use_hkd {
                    let h = losses::hkd_loss(&mut tape, &f_a, &f_s, cfg.k_hard, cfg.level_agg)?;
                    sum_hkd += tape.value(h).item() as f64;
                    Some(h)
                } else {
                    None
                };
                sample_losses.push(losses::stage2_loss(&mut tape, kd, hkd)?);
            }
            let batch_loss = mean_of(&mut tape, &sample_losses)?;
            let grads = tape.backward(batch_loss)?;
            let mut params = bn.tensors_mut();
            params.extend(dec.tensors_mut());
            apply_updates(&mut opt, params, &grads, cfg.lr)?;
        }
        let n = pyramids.len() as f64;
        let kd = sum_kd / n;
        let hkd = sum_hkd / n;
        rows.push(EpochLoss {
            epoch,
            stage: 2,
            total: kd + hkd,
            focal: 0.0,
            la: 0.0,
            kd,
            hkd,
        });
    }

    if teacher.hash() != teacher_hash {
        return Err(Error::Contract {
            message: "teacher weights changed during stage 2".into(),
        });
    }
    if let (Some(r), Some(before)) = (raa, raa_hash) {
        if r.hash() != before {
            return Err(Error::Contract {
                message: "RAA weights changed during stage 2".into(),
            });
        }
    }
    Ok(Stage2Run {
        bottleneck: bn,
        decoder: dec,
        opt,
        losses: rows,
    })
}

// ------------------------------------------------------------ checkpoint

pub const CKPT_MAGIC: &[u8; 8] = b"AANDCKP1";
pub const CKPT_VERSION: u32 = 1;

/// Serialized training state. The teacher itself is derived from the seed;
/// its tensors are stored for inspection and hash-checked on load.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u8,
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: u64,
    pub raa: Option<RaaParams>,
    pub bottleneck: Option<BottleneckParams>,
    pub decoder: Option<DecoderParams>,
    pub opt: Option<AdamState>,
}

impl Checkpoint {
    pub fn model(&self, teacher: &EncoderWeights, cfg: &Config) -> Result<InferenceModel> {
        let (Some(bn), Some(dec)) = (self.bottleneck.clone(), self.decoder.clone()) else {
            return Err(Error::Contract {
                message: "checkpoint has no trained student; run stage 2 first".into(),
            });
        };
        Ok(InferenceModel {
            teacher: teacher.clone(),
            raa: self.raa.clone(),
            bottleneck: bn,
            decoder: dec,
            smoothing: cfg.smoothing_sigma(),
        })
    }
}

pub fn save_checkpoint(
    path: &Path,
    ckpt: &Checkpoint,
    teacher: &EncoderWeights,
    cfg: &Config,
) -> Result<()> {
    let mut tensors = std::collections::BTreeMap::new();
    for (name, t) in teacher.named_tensors() {
        tensors.insert(name, t);
    }
    if let Some(raa) = &ckpt.raa {
        for (name, t) in raa.named_tensors() {
            tensors.insert(name, t);
        }
    }
    if let Some(bn) = &ckpt.bottleneck {
        for (name, t) in bn.named_tensors() {
            tensors.insert(name, t);
        }
    }
    if let Some(dec) = &ckpt.decoder {
        for (name, t) in dec.named_tensors() {
            tensors.insert(name, t);
        }
    }
    if let Some(opt) = &ckpt.opt {
        for (name, t) in opt.export("opt") {
            tensors.insert(name, t);
        }
    }
    let config_text = cfg.to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(ckpt.stage);
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buf.extend_from_slice(&teacher.hash().to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&io::tensors_to_bytes(&tensors));
    io::atomic_write(path, &buf)
}

/// Load a checkpoint, reconstructing the seeded teacher from the embedded
/// config. With `expected` set, a config-hash mismatch is refused.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&Config>,
) -> Result<(Checkpoint, EncoderWeights, Config)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |m: String| Error::Format {
        path: path.display().to_string(),
        message: m,
    };
    if bytes.len() < 45 || &bytes[..8] != CKPT_MAGIC {
        return Err(fmt("bad checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let stage = bytes[12];
    let epoch = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let config_hash = u64::from_le_bytes(bytes[25..33].try_into().unwrap());
    let teacher_hash = u64::from_le_bytes(bytes[33..41].try_into().unwrap());
    let cfg_len = u32::from_le_bytes(bytes[41..45].try_into().unwrap()) as usize;
    if bytes.len() < 45 + cfg_len {
        return Err(fmt("truncated embedded config".into()));
    }
    let cfg_text = std::str::from_utf8(&bytes[45..45 + cfg_len])
        .map_err(|_| fmt("embedded config is not UTF-8".into()))?;
    let cfg = Config::from_text(cfg_text)?;
    if cfg.hash() != config_hash {
        return Err(fmt("embedded config does not match its recorded hash".into()));
    }
    if let Some(want) = expected {
        if want.hash() != config_hash {
            return Err(Error::Contract {
                message: format!(
                    "checkpoint config hash {config_hash:016x} does not match current config {:016x}",
                    want.hash()
                ),
            });
        }
    }
    let tensors = io::tensors_from_bytes(&bytes[45 + cfg_len..], path)?;

    let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
    if teacher.hash() != teacher_hash {
        return Err(Error::Contract {
            message: "checkpoint teacher hash does not match the seeded teacher".into(),
        });
    }

    let raa = if tensors.contains_key("raa/level0/mem_n") {
        let mut r = RaaParams::init(&cfg.enc_channels, cfg.mem_len, cfg.raa_seed(), cfg.phi2_zero_init);
        r.load(&tensors)?;
        Some(r)
    } else {
        None
    };
    let (bottleneck, decoder) = if tensors.contains_key("bn/fuse/w") {
        let mut bn = BottleneckParams::init(&cfg.enc_channels, 0);
        bn.load(&tensors)?;
        let mut dec = DecoderParams::init(&cfg.enc_channels, 0);
        dec.load(&tensors)?;
        (Some(bn), Some(dec))
    } else {
        (None, None)
    };
    let opt = if tensors.contains_key("opt/step") {
        Some(AdamState::import("opt", &tensors)?)
    } else {
        None
    };
    Ok((
        Checkpoint {
            stage,
            epoch,
            seed,
            config_hash,
            raa,
            bottleneck,
            decoder,
            opt,
        },
        teacher,
        cfg,
    ))
}

/// Group hashes used by the stage-isolation checks.
pub fn param_hashes(
    teacher: &EncoderWeights,
    raa: Option<&RaaParams>,
    bn: Option<&BottleneckParams>,
    dec: Option<&DecoderParams>,
) -> (u64, Option<u64>, Option<u64>, Option<u64>) {
    (
        teacher.hash(),
        raa.map(|r| r.hash()),
        bn.map(|b| hash_named(&b.named_tensors())),
        dec.map(|d| hash_named(&d.named_tensors())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_class;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::toy();
        cfg.image_size = 32;
        cfg.train_per_class = 4;
        cfg.test_normal_per_class = 2;
        cfg.test_anomalous_per_class = 2;
        cfg.stage1_epochs = 2;
        cfg.stage2_epochs = 2;
        cfg.batch_size = 2;
        cfg.mem_len = 8;
        cfg.seed = 1;
        cfg
    }

    fn tiny_corpus(cfg: &Config) -> ClassCorpus {
        generate_class(&cfg.corpus_spec(), 0).unwrap()
    }

    #[test]
    fn zero_epoch_runs_return_initialization() {
        let mut cfg = tiny_cfg();
        cfg.stage1_epochs = 0;
        cfg.stage2_epochs = 0;
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let run = train_stage1(&corpus, &teacher, &cfg, None).unwrap();
        let init = RaaParams::init(&cfg.enc_channels, cfg.mem_len, cfg.raa_seed(), cfg.phi2_zero_init);
        assert_eq!(run.raa.hash(), init.hash());
        assert!(run.losses.is_empty());

        let run2 = train_stage2(&corpus, &teacher, Some(&run.raa), &cfg, None).unwrap();
        let bn_init = BottleneckParams::init(&cfg.enc_channels, rng::mix(cfg.student_seed(), 0xB));
        assert_eq!(
            hash_named(&run2.bottleneck.named_tensors()),
            hash_named(&bn_init.named_tensors())
        );
    }

    #[test]
    fn stage1_freezes_teacher_and_updates_only_raa() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let before = teacher.hash();
        let init_hash =
            RaaParams::init(&cfg.enc_channels, cfg.mem_len, cfg.raa_seed(), cfg.phi2_zero_init).hash();
        let run = train_stage1(&corpus, &teacher, &cfg, None).unwrap();
        assert_eq!(teacher.hash(), before);
        assert_ne!(run.raa.hash(), init_hash);
        assert_eq!(run.losses.len(), 2);
    }

    #[test]
    fn stage1_loss_decreases_on_fixed_samples() {
        let mut cfg = tiny_cfg();
        cfg.train_per_class = 8;
        cfg.stage1_epochs = 2;
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let run = train_stage1(&corpus, &teacher, &cfg, None).unwrap();
        assert!(
            run.losses.last().unwrap().total < run.losses[0].total,
            "stage-1 loss did not decrease: {:?}",
            run.losses
        );
    }

    #[test]
    fn stage2_keeps_raa_frozen_and_loss_monotone() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let s1 = train_stage1(&corpus, &teacher, &cfg, None).unwrap();
        let raa_hash = s1.raa.hash();
        let s2 = train_stage2(&corpus, &teacher, Some(&s1.raa), &cfg, None).unwrap();
        assert_eq!(s1.raa.hash(), raa_hash);
        assert!(s2.losses.windows(2).all(|w| w[1].total <= w[0].total + 1e-9),
            "stage-2 epoch losses not monotone: {:?}", s2.losses);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let s1 = train_stage1(&corpus, &teacher, &cfg, None).unwrap();
        let ckpt = Checkpoint {
            stage: 1,
            epoch: cfg.stage1_epochs,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            raa: Some(s1.raa),
            bottleneck: None,
            decoder: None,
            opt: Some(s1.opt),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ckpt, &teacher, &cfg).unwrap();
        let (loaded, teacher2, cfg2) = load_checkpoint(&p1, Some(&cfg)).unwrap();
        assert_eq!(teacher2.hash(), teacher.hash());
        assert_eq!(cfg2, cfg);
        save_checkpoint(&p2, &loaded, &teacher2, &cfg2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // altered config is refused
        let mut other = cfg.clone();
        other.seed = 999;
        assert!(matches!(
            load_checkpoint(&p1, Some(&other)),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg);
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());

        let full = train_stage1(&corpus, &teacher, &cfg, None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.stage1_epochs = 1;
        let half = train_stage1(&corpus, &teacher, &half_cfg, None).unwrap();
        let resumed = train_stage1(&corpus, &teacher, &cfg, Some((half.raa, half.opt, 1))).unwrap();
        assert_eq!(resumed.raa.hash(), full.raa.hash());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let cfg = tiny_cfg();
        let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
        let empty = ClassCorpus {
            class: crate::synth::NormalClass::Stripes,
            train: vec![],
            train_synth: vec![],
            test: vec![],
        };
        assert!(train_stage1(&empty, &teacher, &cfg, None).is_err());
        assert!(train_stage2(&empty, &teacher, None, &cfg, None).is_err());
    }
}

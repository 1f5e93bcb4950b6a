//! `aand` command line: corpus generation, the two training stages,
//! evaluation, single-image inference and feature diagnostics.
//!
//! Exit codes: 0 ok, 2 config error, 3 contract violation, 4 I/O or
//! format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aand_core::config::Config;
use aand_core::error::{Error, Result};
use aand_core::io;
use aand_core::metrics;
use aand_core::scoring;
use aand_core::synth::{self, Image};
use aand_core::teacher::EncoderWeights;
use aand_core::trainer::{self, Checkpoint};

#[derive(Parser)]
#[command(name = "aand", version, about = "Two-stage anomaly detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set seed=7 (repeatable; wins over the file)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the procedural corpus and per-class manifests
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides corpus_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage for the configured class
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stage: u8,
        /// Resume from a mid-stage checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on the test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score a single image; prints the anomaly score
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image as a binary tensor container
        #[arg(long)]
        image: PathBuf,
        /// Write the anomaly map here (.tns plus .pgm preview)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature diagnostics: inter-class distances and residual intensities
    Diag {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Config::from_text(&text)?
        }
        None => Config::default(),
    };
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
            message: format!("--set expects key=value, got `{s}`"),
        })?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Drop the resolved config, its hash and the format identifiers into the
/// output directory so any run can be reproduced bit-identically.
fn echo_config(cfg: &Config, dir: &Path) -> Result<()> {
    io::atomic_write(&dir.join("resolved.cfg"), cfg.to_text().as_bytes())?;
    io::atomic_write(
        &dir.join("config.hash"),
        format!("{:016x}\n", cfg.hash()).as_bytes(),
    )?;
    let formats = format!(
        "tensor_container={}\ncheckpoint={} v{}\nmanifest=index,split,label,image-path,mask-path\n",
        std::str::from_utf8(io::TENSOR_MAGIC).unwrap(),
        std::str::from_utf8(trainer::CKPT_MAGIC).unwrap(),
        trainer::CKPT_VERSION,
    );
    io::atomic_write(&dir.join("formats.txt"), formats.as_bytes())
}

fn cmd_gen_data(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(dir) = out {
        cfg.corpus_dir = dir.display().to_string();
    }
    let spec = cfg.corpus_spec();
    let dir = PathBuf::from(&cfg.corpus_dir);
    for idx in 0..spec.classes.len() {
        let corpus = synth::generate_class(&spec, idx)?;
        let class_dir = synth::write_class(&corpus, &dir)?;
        println!(
            "wrote class `{}`: {} train, {} test -> {}",
            corpus.class,
            corpus.train.len(),
            corpus.test.len(),
            class_dir.display()
        );
    }
    echo_config(&cfg, &dir)
}

fn cmd_train(args: &ConfigArgs, stage: u8, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let class_idx = cfg.class_index()?;
    let corpus = synth::load_class(&cfg.corpus_spec(), class_idx, Path::new(&cfg.corpus_dir))?;
    let teacher = EncoderWeights::init(cfg.encoder_config(), cfg.teacher_seed());
    echo_config(&cfg, &out_dir)?;

    match stage {
        1 => {
            if !cfg.use_raa {
                return Err(Error::Contract {
                    message: "stage 1 trains the RAA module but use_raa=false".into(),
                });
            }
            let resume_state = match resume {
                Some(path) => {
                    let (ckpt, _, _) = trainer::load_checkpoint(path, Some(&cfg))?;
                    if ckpt.stage != 1 {
                        return Err(Error::Contract {
                            message: format!("--resume expects a stage-1 checkpoint, got stage {}", ckpt.stage),
                        });
                    }
                    Some((
                        ckpt.raa.ok_or_else(|| Error::Contract {
                            message: "stage-1 checkpoint is missing RAA parameters".into(),
                        })?,
                        ckpt.opt.unwrap_or_default(),
                        ckpt.epoch,
                    ))
                }
                None => None,
            };
            let run = trainer::train_stage1(&corpus, &teacher, &cfg, resume_state)?;
            trainer::write_loss_csv(&out_dir.join("losses_stage1.csv"), &run.losses)?;
            let ckpt = Checkpoint {
                stage: 1,
                epoch: cfg.stage1_epochs,
                seed: cfg.seed,
                config_hash: cfg.hash(),
                raa: Some(run.raa),
                bottleneck: None,
                decoder: None,
                opt: Some(run.opt),
            };
            let path = out_dir.join("stage1.ckpt");
            trainer::save_checkpoint(&path, &ckpt, &teacher, &cfg)?;
            println!("stage 1 done -> {}", path.display());
        }
        2 => {
            let (raa, resume_state) = match resume {
                Some(path) => {
                    let (ckpt, _, _) = trainer::load_checkpoint(path, Some(&cfg))?;
                    if ckpt.stage != 2 {
                        return Err(Error::Contract {
                            message: format!("--resume expects a stage-2 checkpoint, got stage {}", ckpt.stage),
                        });
                    }
                    let state = match (ckpt.bottleneck, ckpt.decoder) {
                        (Some(b), Some(d)) => Some((b, d, ckpt.opt.unwrap_or_default(), ckpt.epoch)),
                        _ => {
                            return Err(Error::Contract {
                                message: "stage-2 checkpoint is missing student parameters".into(),
                            })
                        }
                    };
                    (ckpt.raa, state)
                }
                None if cfg.use_raa => {
                    let stage1_path = out_dir.join("stage1.ckpt");
                    if !stage1_path.exists() {
                        return Err(Error::Contract {
                            message: format!(
                                "stage 2 requires {} (run `aand train --stage 1` first)",
                                stage1_path.display()
                            ),
                        });
                    }
                    let (ckpt, _, _) = trainer::load_checkpoint(&stage1_path, Some(&cfg))?;
                    (ckpt.raa, None)
                }
                None => (None, None),
            };
            if cfg.use_raa && raa.is_none() {
                return Err(Error::Contract {
                    message: "use_raa=true but no trained RAA parameters are available".into(),
                });
            }
            let run = trainer::train_stage2(&corpus, &teacher, raa.as_ref(), &cfg, resume_state)?;
            trainer::write_loss_csv(&out_dir.join("losses_stage2.csv"), &run.losses)?;
            let ckpt = Checkpoint {
                stage: 2,
                epoch: cfg.stage2_epochs,
                seed: cfg.seed,
                config_hash: cfg.hash(),
                raa,
                bottleneck: Some(run.bottleneck),
                decoder: Some(run.decoder),
                opt: Some(run.opt),
            };
            let path = out_dir.join("stage2.ckpt");
            trainer::save_checkpoint(&path, &ckpt, &teacher, &cfg)?;
            println!("stage 2 done -> {}", path.display());
        }
        other => {
            return Err(Error::Config {
                message: format!("--stage must be 1 or 2, got {other}"),
            })
        }
    }
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, ckpt_path: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let (ckpt, teacher, _) = trainer::load_checkpoint(ckpt_path, Some(&cfg))?;
    let model = ckpt.model(&teacher, &cfg)?;
    let class_idx = cfg.class_index()?;
    let corpus = synth::load_class(&cfg.corpus_spec(), class_idx, Path::new(&cfg.corpus_dir))?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    echo_config(&cfg, &out_dir)?;

    let maps_dir = out_dir.join("maps");
    let mut maps = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut gts = Vec::new();
    for (i, sample) in corpus.test.iter().enumerate() {
        let (map, score) = model.score_image(&sample.image)?;
        io::save_tensor(&maps_dir.join(format!("map_{i:04}.tns")), &map)?;
        io::save_pgm(&maps_dir.join(format!("map_{i:04}.pgm")), &map)?;
        maps.push(map);
        scores.push(score);
        labels.push(sample.anomalous);
        gts.push(sample.mask.clone());
    }
    let report = metrics::report_from_maps(&maps, &scores, &labels, &gts, cfg.fpr_limit, cfg.hash())?;
    let csv = format!(
        "{}\n{}\n",
        metrics::EvalReport::csv_header(),
        report.csv_row(&cfg.class)
    );
    io::atomic_write(&out_dir.join("eval.csv"), csv.as_bytes())?;
    println!(
        "class={} i_auc={:.4} p_auc={:.4} pro={:.4}",
        cfg.class, report.i_auc, report.p_auc, report.pro
    );
    Ok(())
}

fn cmd_infer(ckpt_path: &Path, image_path: &Path, out: Option<&Path>) -> Result<()> {
    let (ckpt, teacher, cfg) = trainer::load_checkpoint(ckpt_path, None)?;
    let model = ckpt.model(&teacher, &cfg)?;
    let image = Image::new(io::load_tensor(image_path)?)?;
    let (map, score) = model.score_image(&image)?;
    println!("score={score:.6}");
    if let Some(path) = out {
        io::save_tensor(path, &map)?;
        let mut pgm = path.as_os_str().to_owned();
        pgm.push(".pgm");
        io::save_pgm(Path::new(&pgm), &map)?;
    }
    Ok(())
}

fn cmd_diag(args: &ConfigArgs, ckpt_path: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let (ckpt, teacher, _) = trainer::load_checkpoint(ckpt_path, Some(&cfg))?;
    let class_idx = cfg.class_index()?;
    let corpus = synth::load_class(&cfg.corpus_spec(), class_idx, Path::new(&cfg.corpus_dir))?;
    let report = scoring::diagnose(&teacher, ckpt.raa.as_ref(), &corpus.test, cfg.seed)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    echo_config(&cfg, &out_dir)?;
    io::atomic_write(&out_dir.join("diag.csv"), report.csv().as_bytes())?;
    print!("{}", report.csv());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { cfg, out } => cmd_gen_data(cfg, out.as_deref()),
        Command::Train { cfg, stage, resume } => cmd_train(cfg, *stage, resume.as_deref()),
        Command::Eval { cfg, ckpt } => cmd_eval(cfg, ckpt),
        Command::Infer { ckpt, image, out } => cmd_infer(ckpt, image, out.as_deref()),
        Command::Diag { cfg, ckpt } => cmd_diag(cfg, ckpt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("E{}: {e}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

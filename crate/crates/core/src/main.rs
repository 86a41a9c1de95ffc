//! Command-line entry point: train / eval / analyze / export / gradcheck /
//! sample-check / synth-data over the library.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 divergence,
//! 4 I/O or checkpoint error.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;
use torsd::analysis::{embed_2d, emit_report, extract_depth_features, gradcheck, sse_ssb, TsneOptions};
use torsd::backbone::BackboneKind;
use torsd::checkpoint::{export_stripped, load_checkpoint};
use torsd::config::{
    apply_key, default_paper_config, load_config, validate_config, OptimConfig, TorsdConfig,
};
use torsd::data::{
    assemble_batches, load_dataset, make_synthetic, sample_epoch_triplets, save_packed, Augmentor,
};
use torsd::error::TorsdError;
use torsd::model::ModelBundle;
use torsd::trainer::{epoch_seed, evaluate_stripped, train};

#[derive(Parser)]
#[command(
    name = "torsd",
    version,
    about = "Relational self-distillation trainer: triplet-structured input, trainable relation \
             heads at every depth, deep-to-shallow distillation, all removable at inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (key=value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(TorsdConfig, OptimConfig), TorsdError> {
        let (mut cfg, mut opt) = match &self.config {
            Some(path) => load_config(path)?,
            None => (default_paper_config(), OptimConfig::default()),
        };
        for assignment in &self.set {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                TorsdError::ConfigSyntax(format!("--set expects key=value, got `{assignment}`"))
            })?;
            apply_key(&mut cfg, &mut opt, key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        validate_config(&cfg, &opt).into_result()?;
        Ok((cfg, opt))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset: packed binary file or index directory.
        #[arg(long)]
        data: PathBuf,
        /// Held-out evaluation dataset (defaults to the training set).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Output directory for metrics, checkpoints, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Backbone: toy_cnn, toy_cnn:w1,w2,w3,w4 or resnet18_like.
        #[arg(long, default_value = "toy_cnn")]
        backbone: String,
        /// Resume from a resumable checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint through the stripped inference path.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where eval.csv is written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the backbone-only (inference) form of a checkpoint.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-depth separability and 2-D embeddings of a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the embedding export to one depth.
        #[arg(long)]
        depth: Option<usize>,
        /// Cap on samples fed to t-SNE.
        #[arg(long, default_value_t = 500)]
        max_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify analytic gradients of the full objective on a tiny bundle.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tolerance on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Verify the triplet partition properties over several epochs.
    SampleCheck {
        #[arg(long)]
        data: PathBuf,
        /// Number of seeded epochs to verify.
        #[arg(long, default_value_t = 20)]
        epochs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic class-pattern dataset (packed binary).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Per-pixel noise level; higher is harder.
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(err: &TorsdError) -> u8 {
    match err {
        TorsdError::ConfigSyntax(_) | TorsdError::ConfigValidation { .. } | TorsdError::Argument(_) => 1,
        TorsdError::SamplingInfeasible(_)
        | TorsdError::InvalidImage(_)
        | TorsdError::Shape { .. }
        | TorsdError::InvalidTriplet(_)
        | TorsdError::Degenerate(_)
        | TorsdError::State(_) => 2,
        TorsdError::Divergence { .. } => 3,
        TorsdError::Io { .. } | TorsdError::CorruptBlob { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version itself with exit 0
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, TorsdError> {
    match cli.command {
        Command::Train {
            config,
            data,
            eval_data,
            out,
            backbone,
            resume,
        } => {
            let (cfg, opt) = config.resolve()?;
            let kind = BackboneKind::parse(&backbone)?;
            let train_ds = load_dataset(&data)?;
            let eval_ds = eval_data.as_deref().map(load_dataset).transpose()?;
            let outcome = train::<f32>(
                &train_ds,
                eval_ds.as_ref(),
                &kind,
                &cfg,
                &opt,
                &data.display().to_string(),
                &out,
                resume.as_deref(),
            )?;
            println!(
                "trained {} steps; final top-1 {:.4}; checkpoint at {}",
                outcome.steps_run,
                outcome.final_eval.top1,
                outcome.final_checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ckpt, data, out } => {
            let loaded = load_checkpoint::<f32>(&ckpt)?;
            let ds = load_dataset(&data)?;
            let mut stripped = loaded.bundle.strip_for_inference()?;
            let report = evaluate_stripped(&mut stripped, &ds)?;
            std::fs::create_dir_all(&out).map_err(|e| TorsdError::io(&out, e))?;
            let path = out.join("eval.csv");
            let mut text = String::from("top1,loss\n");
            text.push_str(&format!("{},{}\n", report.top1, report.loss));
            std::fs::write(&path, text).map_err(|e| TorsdError::io(&path, e))?;
            println!("top-1 accuracy: {:.4}", report.top1);
            println!("mean loss:      {:.4}", report.loss);
            for (c, tally) in report.per_class.iter().enumerate() {
                if tally.count > 0 {
                    println!(
                        "class {c}: {}/{} = {:.4}",
                        tally.correct,
                        tally.count,
                        tally.correct as f64 / tally.count as f64
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { ckpt, out } => {
            let dir = export_stripped::<f32>(&ckpt, &out)?;
            println!("stripped checkpoint written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze {
            ckpt,
            data,
            out,
            depth,
            max_samples,
            seed,
        } => {
            let loaded = load_checkpoint::<f32>(&ckpt)?;
            let mut bundle = loaded.bundle;
            let ds = load_dataset(&data)?;
            let k = bundle.backbone.depth_count();
            if let Some(d) = depth {
                if d == 0 || d > k {
                    return Err(TorsdError::Argument(format!(
                        "depth {d} out of range 1..={k}"
                    )));
                }
            }
            let depths: Vec<usize> = match depth {
                Some(d) => vec![d],
                None => (1..=k).collect(),
            };
            // Separability is cheap; computed on the full dataset.
            let mut rows = Vec::new();
            for d in 1..=k {
                let set = extract_depth_features(&mut bundle, &ds, d)?;
                let (sse, ssb, ratio) = sse_ssb(&set)?;
                rows.push(torsd::analysis::SeparabilityRow {
                    depth: d,
                    sse,
                    ssb,
                    ratio,
                });
            }
            // t-SNE is quadratic; cap its input.
            let subset_len = ds.len().min(max_samples);
            let mut embeddings = Vec::new();
            for d in &depths {
                let set = extract_depth_features(&mut bundle, &ds, *d)?;
                let feats = &set.features[..subset_len];
                let labels = &set.labels[..subset_len];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let emb = embed_2d(feats, labels, &mut rng, &TsneOptions::default())?;
                embeddings.push((*d, emb));
            }
            emit_report(&rows, &embeddings, None, &out)?;
            for r in &rows {
                println!(
                    "depth {}: sse {:.4} ssb {:.4} ratio {:.4}",
                    r.depth, r.sse, r.ssb, r.ratio
                );
            }
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, tolerance } => {
            let mut cfg = default_paper_config();
            cfg.seed = seed;
            cfg.embed_dim = 4;
            let kind = BackboneKind::ToyCnn {
                widths: BackboneKind::TINY_WIDTHS,
            };
            let mut bundle = ModelBundle::<f64>::new(&kind, 2, &cfg)?;
            println!(
                "tiny bundle: {} trainable parameters",
                bundle.param_count()
            );
            let ds = make_synthetic(2, 4, 32, 32, 3, 0.25, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = sample_epoch_triplets(&ds, &mut rng)?;
            let aug = Augmentor::identity(32, 32, 3);
            let batch = assemble_batches::<f64>(
                &sample.triplets[..1],
                &ds,
                3,
                &aug,
                false,
                ChaCha8Rng::seed_from_u64(seed),
            )?
            .next()
            .expect("one triplet forms one batch")?;
            let report = gradcheck(&mut bundle, &cfg, &batch)?;
            let mut groups = report.groups.clone();
            groups.sort_by(|a, b| a.group.cmp(&b.group));
            for g in &groups {
                println!("{:40} max rel err {:.3e}", g.group, g.max_rel_err);
            }
            for name in &report.nonfinite {
                println!("non-finite analytic gradient: {name}");
            }
            println!("overall max rel err {:.3e}", report.max_rel_err);
            if report.passed(tolerance) {
                println!("gradcheck PASS (tolerance {tolerance:.1e})");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck FAIL (tolerance {tolerance:.1e})");
                Ok(ExitCode::from(1))
            }
        }
        Command::SampleCheck { data, epochs, seed } => {
            let ds = load_dataset(&data)?;
            let mut total_triplets = 0usize;
            for epoch in 0..epochs {
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
                let sample = sample_epoch_triplets(&ds, &mut rng)?;
                let mut seen = vec![false; ds.len()];
                for t in &sample.triplets {
                    for idx in [t.anchor, t.positive, t.negative] {
                        if seen[idx] {
                            return Err(TorsdError::State(format!(
                                "epoch {epoch}: index {idx} used twice"
                            )));
                        }
                        seen[idx] = true;
                    }
                    if ds.label(t.anchor) != ds.label(t.positive)
                        || ds.label(t.anchor) == ds.label(t.negative)
                    {
                        return Err(TorsdError::InvalidTriplet(format!(
                            "epoch {epoch}: label constraints violated"
                        )));
                    }
                }
                if sample.triplets.len() * 3 + sample.dropped != ds.len() {
                    return Err(TorsdError::State(format!(
                        "epoch {epoch}: usage accounting broken"
                    )));
                }
                total_triplets += sample.triplets.len();
            }
            println!(
                "sample-check PASS: {epochs} epochs, {} triplets total, all partition and label properties hold",
                total_triplets
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::SynthData {
            out,
            classes,
            per_class,
            height,
            width,
            channels,
            noise,
            seed,
        } => {
            let ds = make_synthetic(classes, per_class, height, width, channels, noise, seed);
            save_packed(&ds, &out)?;
            println!(
                "wrote {} samples ({} classes, {}x{}x{}) to {}",
                ds.len(),
                classes,
                height,
                width,
                channels,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

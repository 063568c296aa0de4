use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcloak::advnet::{apply_perturbation, Stage};
use advcloak::artifact::{
    checkpoint_info, load_discriminator, load_embedder, load_generator, load_mask, save_discriminator, save_embedder,
    save_generator, save_mask, sha256_hex,
};
use advcloak::baselines::{advfaces_plus, fi_uap, random_noise_mask, FiUapConfig};
use advcloak::config::{Method, RunConfig};
use advcloak::dataio::{
    list_images, load_corpus, load_image, save_corpus, save_png, split_corpus, synth_corpus, FaceImage,
    ImageShape, SplitSpec,
};
use advcloak::embedder::{train_embedder, Arch, EmbedderConfig, FeatureExtractor, Head};
use advcloak::evalharness::{
    compute_ssim, desk_norm_target, evaluate_masks, normalize_mask, TargetModel, REPORT_SCHEMA_VERSION,
};
use advcloak::losses::AdvObjectiveKind;
use advcloak::pipeline::{enable_deterministic_mode, run_end_to_end};
use advcloak::trainer::{aggregate_mask, train_stage1, train_stage2, NoHooks, PersonMask, StageIConfig, StageIIConfig};
use advcloak::{Error, ErrorCategory, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "advcloak", version, about = "Person-specific adversarial privacy masks")]
struct Cli {
    /// Pin numeric kernels to one thread for bit-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct ShapeArgs {
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

impl ShapeArgs {
    fn shape(self) -> ImageShape {
        ImageShape::new(self.height, self.width, 3)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face corpus as `<out>/<identity>/<image>.png`.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        identities: usize,
        #[arg(long, default_value_t = 16)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Split a corpus into inference, test and distractor sets; writes a manifest.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_inference: usize,
        #[arg(long, default_value_t = 5)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        n_distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Train a recognition model on `<corpus>/<identity>/<image>`.
    TrainEmbedder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "small_cnn_a")]
        arch: Arch,
        #[arg(long, default_value = "softmax")]
        head: Head,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Train the cloak generator (stage 1 from scratch, stage 2 from a stage-1 checkpoint).
    TrainCloak {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        /// Stage-1 generator checkpoint (stage 2 only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stage-1 discriminator checkpoint (stage 2 only).
        #[arg(long)]
        init_disc: Option<PathBuf>,
        #[arg(long, default_value = "plain")]
        adv_kind: AdvObjectiveKind,
        /// TOML file with a `[stage1]` or `[stage2]` section; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a generator's perturbations over one identity's images into a mask.
    GenMask {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        identity_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Identity recorded in the mask; defaults to the directory name.
        #[arg(long)]
        identity: Option<String>,
    },
    /// Add a mask, rescaled to `--norm`, to every image in a directory.
    Protect {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// L2 norm on the 0-255 scale; the size-scaled desk value when omitted.
        #[arg(long)]
        norm: Option<f64>,
    },
    /// Craft a mask with a comparison method.
    Baseline {
        /// fi-uap, opom-affine, opom-center, opom-convex, advfaces+ or random-noise.
        #[arg(long)]
        method: Method,
        #[arg(long)]
        identity_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source recognition model (FI-UAP and OPOM).
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Stage-1 generator (AdvFaces+).
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        identity: Option<String>,
        /// Mask size for random-noise.
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Protection success rates of a directory of masks against target models.
    Evaluate {
        /// Directory of `<identity>.mask` files.
        #[arg(long)]
        masks: PathBuf,
        /// Test images as `<test>/<identity>/<image>`.
        #[arg(long)]
        test: PathBuf,
        /// Distractor identities as `<distractors>/<identity>/<image>`.
        #[arg(long)]
        distractors: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        norm: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Accepted generator content hashes; masks from other producers are refused.
        #[arg(long = "allow-generator")]
        allow_generator: Vec<String>,
        /// Evaluate even when a mask fails the allowlist.
        #[arg(long)]
        force: bool,
    },
    /// Data, recognition models, cloak training, masks and report in one run.
    EndToEnd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Precondition => 2,
        ErrorCategory::Numeric => 3,
        ErrorCategory::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        enable_deterministic_mode();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn json_hash(value: &impl Serialize) -> String {
    sha256_hex(serde_json::to_string(value).expect("serialisable").as_bytes())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dir_images(dir: &Path, shape: ImageShape) -> Result<Vec<FaceImage>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::precondition(format!("no images in {}", dir.display())));
    }
    files.iter().map(|f| load_image(f, shape)).collect()
}

fn identity_name(dir: &Path, explicit: Option<String>) -> String {
    explicit.unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "identity".into())
    })
}

fn print_mask_summary(path: &Path, m: &PersonMask) {
    println!(
        "wrote {} (identity {}, method {}, {} images, norm {:.3})",
        path.display(),
        m.identity,
        m.method,
        m.n_images,
        m.norm_l2_255()
    );
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthCorpus {
            out,
            identities,
            images,
            seed,
            shape,
        } => {
            let c = synth_corpus(identities, images, shape.shape(), seed)?;
            save_corpus(&c, &out)?;
            println!("wrote {} identities x {} images to {}", c.len(), images, out.display());
        }
        Command::Split {
            corpus,
            out,
            n_inference,
            n_test,
            n_distractors,
            seed,
            shape,
        } => {
            let c = load_corpus(&corpus, shape.shape())?;
            let spec = SplitSpec {
                n_inference,
                n_test,
                n_distractors,
                seed,
            };
            let s = split_corpus(&c, &spec)?;
            write_file(&out, &s.manifest.to_json())?;
            println!(
                "{} probe identities, {} distractors; manifest {}",
                s.test.len(),
                s.distractors.len(),
                out.display()
            );
        }
        Command::TrainEmbedder {
            corpus,
            out,
            arch,
            head,
            epochs,
            seed,
            shape,
        } => {
            let c = load_corpus(&corpus, shape.shape())?;
            let cfg = EmbedderConfig {
                arch,
                head,
                epochs,
                seed,
                ..Default::default()
            };
            let m = train_embedder(&c, &cfg)?;
            save_embedder(&out, &m, Some(&json_hash(&cfg)))?;
            println!(
                "wrote {} (training accuracy {:.3}, hash {})",
                out.display(),
                m.training_accuracy().unwrap_or(f64::NAN),
                m.content_hash()?
            );
        }
        Command::TrainCloak {
            stage,
            corpus,
            embedder,
            init,
            init_disc,
            adv_kind,
            config,
            epochs,
            learning_rate,
            epsilon,
            seed,
            out,
        } => {
            let emb = load_embedder(&embedder)?;
            let c = load_corpus(&corpus, emb.input_shape())?;
            let base = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let (g, d, log, hash) = if stage == 1 {
                let cfg = StageIConfig {
                    epochs: epochs.unwrap_or(base.stage1.epochs),
                    learning_rate: learning_rate.unwrap_or(base.stage1.learning_rate),
                    epsilon: epsilon.unwrap_or(base.stage1.epsilon),
                    seed: seed.unwrap_or(base.stage1.seed),
                    ..base.stage1.clone()
                };
                let (g, d, log) = train_stage1(&c, &emb, &cfg, &mut NoHooks)?;
                (g, d, log, json_hash(&cfg))
            } else {
                let (Some(gp), Some(dp)) = (init, init_disc) else {
                    return Err(Error::precondition("stage 2 needs --init and --init-disc stage-1 checkpoints"));
                };
                let g1 = load_generator(&gp)?;
                let d1 = load_discriminator(&dp)?;
                if g1.stage() != Stage::I {
                    return Err(Error::precondition(format!("{} is not a stage-1 generator", gp.display())));
                }
                let cfg = StageIIConfig {
                    adv_kind,
                    epochs: epochs.unwrap_or(base.stage2.epochs),
                    learning_rate: learning_rate.unwrap_or(base.stage2.learning_rate),
                    epsilon: epsilon.unwrap_or(base.stage2.epsilon),
                    seed: seed.unwrap_or(base.stage2.seed),
                    ..base.stage2.clone()
                };
                let (g, d, log) = train_stage2(&c, &emb, (&g1, &d1), &cfg, &mut NoHooks)?;
                (g, d, log, json_hash(&cfg))
            };
            save_generator(&out.join("generator.ckpt"), &g, Some(&hash))?;
            save_discriminator(&out.join("discriminator.ckpt"), &d, Some(&hash))?;
            log.save(&out.join("log.jsonl"))?;
            if let Some(last) = log.records.last() {
                println!(
                    "stage {stage}: {} steps, last adv {:.4}, mean norm {:.1}",
                    log.records.len(),
                    last.adv,
                    last.mean_norm_255
                );
            }
            println!("generator hash {}", g.content_hash()?);
        }
        Command::GenMask {
            generator,
            identity_dir,
            out,
            identity,
        } => {
            let g = load_generator(&generator)?;
            let images = load_dir_images(&identity_dir, g.shape())?;
            let config_hash = checkpoint_info(&generator)?.config_hash;
            let m = aggregate_mask(&g, &identity_name(&identity_dir, identity), &images)?;
            save_mask(&out, &m, config_hash.as_deref())?;
            print_mask_summary(&out, &m);
        }
        Command::Protect {
            mask,
            images,
            out,
            norm,
        } => protect(&mask, &images, &out, norm)?,
        Command::Baseline {
            method,
            identity_dir,
            out,
            embedder,
            generator,
            iterations,
            seed,
            identity,
            shape,
        } => {
            let id = identity_name(&identity_dir, identity);
            let (m, hash) = match method {
                Method::FiUap | Method::Opom(_) => {
                    let p = embedder.ok_or_else(|| Error::precondition(format!("{method} needs --embedder")))?;
                    let emb = load_embedder(&p)?;
                    let images = load_dir_images(&identity_dir, emb.input_shape())?;
                    let cfg = FiUapConfig {
                        iterations,
                        seed,
                        hull_kind: match method {
                            Method::Opom(k) => Some(k),
                            _ => None,
                        },
                        ..Default::default()
                    };
                    (fi_uap(&id, &images, &emb, &cfg)?, Some(json_hash(&cfg)))
                }
                Method::AdvFacesPlus => {
                    let p = generator.ok_or_else(|| Error::precondition("advfaces+ needs --generator"))?;
                    let g = load_generator(&p)?;
                    let images = load_dir_images(&identity_dir, g.shape())?;
                    (advfaces_plus(&g, &id, &images)?, checkpoint_info(&p)?.config_hash)
                }
                Method::RandomNoise => (random_noise_mask(&id, shape.shape(), seed)?, None),
                Method::AdvCloak(_) => {
                    return Err(Error::precondition("use gen-mask for AdvCloak masks"));
                }
            };
            save_mask(&out, &m, hash.as_deref())?;
            print_mask_summary(&out, &m);
        }
        Command::Evaluate {
            masks,
            test,
            distractors,
            targets,
            norm,
            report,
            allow_generator,
            force,
        } => evaluate(&masks, &test, &distractors, &targets, norm, report.as_deref(), &allow_generator, force)?,
        Command::EndToEnd { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let r = run_end_to_end(&cfg)?;
            print!("{}", r.table());
            if let Some(dir) = &cfg.out_dir {
                println!("report written to {}", dir.join("report.json").display());
            }
        }
    }
    Ok(())
}

fn protect(mask_path: &Path, images: &Path, out: &Path, norm: Option<f64>) -> Result<()> {
    let file = load_mask(mask_path)?;
    let shape = file.mask.mask.shape();
    let target = norm.unwrap_or_else(|| desk_norm_target(shape));
    if !(target >= 0.0 && target.is_finite()) {
        return Err(Error::precondition("--norm must be finite and non-negative"));
    }
    let files = list_images(images)?;
    if files.is_empty() {
        return Err(Error::precondition(format!("no images in {}", images.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scaled = if target == 0.0 {
        None
    } else {
        Some(normalize_mask(&file.mask, target)?.mask)
    };
    let mut ssim = 0.0;
    for f in &files {
        let name = f.file_name().expect("listed file");
        match &scaled {
            None => {
                let dst = out.join(name);
                std::fs::copy(f, &dst).map_err(|e| Error::io(&dst, e))?;
                ssim += 1.0;
            }
            Some(mask) => {
                let x = load_image(f, shape)?;
                let y = apply_perturbation(&x, mask)?;
                ssim += compute_ssim(&x, &y)?;
                save_png(&y, &out.join(Path::new(name).with_extension("png")))?;
            }
        }
    }
    println!(
        "protected {} images at norm {:.3}; mean SSIM {:.4}",
        files.len(),
        target,
        ssim / files.len() as f64
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    schema_version: u32,
    code_version: &'a str,
    mask_config_hashes: BTreeSet<String>,
    report: advcloak::evalharness::ProtectionReport,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    masks_dir: &Path,
    test_dir: &Path,
    distractor_dir: &Path,
    target_paths: &[PathBuf],
    norm: Option<f64>,
    report_path: Option<&Path>,
    allow: &[String],
    force: bool,
) -> Result<()> {
    let mut masks = BTreeMap::new();
    let mut config_hashes = BTreeSet::new();
    let entries = std::fs::read_dir(masks_dir).map_err(|e| Error::io(masks_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mask"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::precondition(format!("no .mask files in {}", masks_dir.display())));
    }
    for p in &paths {
        let f = load_mask(p)?;
        if !allow.is_empty() {
            let ok = f.mask.generator_hash.as_ref().is_some_and(|h| allow.contains(h));
            if !ok && !force {
                return Err(Error::precondition(format!(
                    "{} was produced by generator {} which is not in the allowlist (use --force to override)",
                    p.display(),
                    f.mask.generator_hash.as_deref().unwrap_or("<none>")
                )));
            }
        }
        if let Some(h) = f.config_hash {
            config_hashes.insert(h);
        }
        masks.insert(f.mask.identity.clone(), f.mask);
    }
    let shape = masks.values().next().expect("non-empty").mask.shape();
    let method = masks.values().next().expect("non-empty").method.clone();
    let test = load_corpus(test_dir, shape)?;
    let missing: Vec<&str> = test.ids().filter(|id| !masks.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::precondition(format!("no mask for test identities: {}", missing.join(", "))));
    }
    let distractors = load_corpus(distractor_dir, shape)?;
    let models = target_paths.iter().map(|p| load_embedder(p)).collect::<Result<Vec<_>>>()?;
    let targets = target_paths
        .iter()
        .zip(&models)
        .map(|(p, m)| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            TargetModel::new(name, m, &distractors)
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = norm.unwrap_or_else(|| desk_norm_target(shape));
    let masks: BTreeMap<String, PersonMask> = masks.into_iter().filter(|(id, _)| test.get(id).is_some()).collect();
    let r = evaluate_masks(&method, &masks, &test, &targets, norm, None)?;
    for row in &r.rows {
        println!(
            "{:<16} top1 PSR {:>6.2}  top5 PSR {:>6.2}  ({} pairs)",
            row.model, row.top1_psr, row.top5_psr, row.pair_count
        );
    }
    println!("average top1 {:.2} top5 {:.2}; mean SSIM {:.4}", r.average_top1(), r.average_top5(), r.mean_ssim);
    if let Some(p) = report_path {
        let out = EvaluateReport {
            schema_version: REPORT_SCHEMA_VERSION,
            code_version: advcloak::artifact::CODE_VERSION,
            mask_config_hashes: config_hashes,
            report: r,
        };
        write_file(p, &serde_json::to_string_pretty(&out).expect("serialisable"))?;
    }
    Ok(())
}

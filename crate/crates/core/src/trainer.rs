//! Two-stage cloak training.
//!
//! Stage I trains the generator image by image: every image gets its own
//! perturbation. Stage II warm-starts from stage I and trains person-specific
//! masks: the perturbations of an identity's images are averaged into one
//! mask, which is then applied to all of that identity's images before the
//! losses are taken.
//!
//! Each step updates G first (against a frozen view of D) and then D (on the
//! detached fakes of the same step), so every logged term is evaluated at the
//! parameters the step started from.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advnet::{
    generate, DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel, PerturbationMap, Stage,
};
use crate::dataio::{images_to_tensor, FaceImage, IdentityCorpus, ImageShape};
use crate::embedder::{embed_all, EmbedderModel, FeatureExtractor};
use crate::error::{Error, Result};
use crate::losses::{
    adv_distance_rows, assemble, gan_terms, group_weights, norm_hinge, norms_255, scaled_epsilon, AdvObjectiveKind,
    HullTarget, LossWeights,
};
use crate::nn::{adam, scalar};
use crate::subspace::{build_hull, FeatureHull, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageIConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub lambda_norm: f64,
    pub lambda_adv: f64,
    /// Norm-hinge threshold on the 0-255 scale. The default assumes 32x32x3
    /// images; see [`scaled_epsilon`].
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Run the validation hook every this many steps; 0 disables it.
    pub validate_every: usize,
}

impl Default for StageIConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_betas: (0.5, 0.9),
            lambda_norm: 1.0,
            lambda_adv: 10.0,
            epsilon: scaled_epsilon(ImageShape::default()),
            epochs: 10,
            batch_size: 32,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            validate_every: 0,
        }
    }
}

impl StageIConfig {
    /// Threshold of 3 read directly on the 0-255 scale.
    pub fn paper_preset() -> Self {
        Self {
            epsilon: 3.0,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_norm: self.lambda_norm,
            lambda_adv: self.lambda_adv,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        check_optimizer(self.learning_rate, self.adam_betas)?;
        if self.batch_size == 0 {
            return Err(Error::precondition("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageIIConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub lambda_norm: f64,
    pub lambda_adv: f64,
    pub epsilon: f64,
    pub n_per_identity: usize,
    pub identities_per_batch: usize,
    pub adv_kind: AdvObjectiveKind,
    pub hull_target: HullTarget,
    pub epochs: usize,
    pub seed: u64,
    pub validate_every: usize,
}

impl Default for StageIIConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            adam_betas: (0.5, 0.9),
            lambda_norm: 1.0,
            lambda_adv: 15.0,
            epsilon: scaled_epsilon(ImageShape::default()),
            n_per_identity: 16,
            identities_per_batch: 4,
            adv_kind: AdvObjectiveKind::Plain,
            hull_target: HullTarget::Renormalized,
            epochs: 10,
            seed: 0,
            validate_every: 0,
        }
    }
}

impl StageIIConfig {
    /// Full-scale values: fine-tuning rate 2e-8 and a threshold of 3 read
    /// directly on the 0-255 scale. Neither moves a toy model measurably.
    pub fn paper_preset() -> Self {
        Self {
            learning_rate: 2e-8,
            epsilon: 3.0,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_norm: self.lambda_norm,
            lambda_adv: self.lambda_adv,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        check_optimizer(self.learning_rate, self.adam_betas)?;
        if self.n_per_identity == 0 || self.identities_per_batch == 0 {
            return Err(Error::precondition("stage II batch sizes must be at least 1"));
        }
        if self.adv_kind.hull_kind().is_some() && self.n_per_identity < 2 {
            return Err(Error::precondition("hull objectives need n_per_identity >= 2"));
        }
        Ok(())
    }
}

fn check_optimizer(lr: f64, betas: (f64, f64)) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::precondition("learning rate must be positive"));
    }
    if !((0.0..1.0).contains(&betas.0) && (0.0..1.0).contains(&betas.1)) {
        return Err(Error::precondition("Adam betas must lie in [0, 1)"));
    }
    Ok(())
}

/// One logged training step. All values are taken at the step-start parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub gan_gen: f64,
    pub gan_disc: f64,
    pub norm: f64,
    pub adv: f64,
    pub total: f64,
    /// Mean perturbation (stage I) or mask (stage II) norm, 0-255 scale.
    pub mean_norm_255: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        let values = [record.gan_gen, record.gan_disc, record.norm, record.adv, record.total, record.mean_norm_255];
        if values.iter().chain(record.validation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("stage {} training log", record.stage),
                epoch: record.epoch,
                step: record.step,
            });
        }
        if let Some(last) = self.records.last() {
            if last.stage == record.stage && record.step <= last.step {
                return Err(Error::precondition("training log steps must increase"));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self::default();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            log.push(r)?;
        }
        Ok(log)
    }
}

/// Callbacks into the training loop.
pub trait TrainingHooks {
    /// Called before each update with the parameters the step will log.
    fn on_step_start(&mut self, _record_step: usize, _gen: &GeneratorModel, _disc: &DiscriminatorModel) -> Result<()> {
        Ok(())
    }

    /// Periodic validation score (e.g. a protection rate) of the current generator.
    fn validate(&mut self, _gen: &GeneratorModel) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainingHooks for NoHooks {}

/// A single additive mask shared by all images of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonMask {
    pub identity: String,
    pub mask: PerturbationMap,
    pub n_images: usize,
    /// Producer name, e.g. `advcloak`, `advfaces+`, `fi-uap`.
    pub method: String,
    /// Content hash of the generator that produced it, when there is one.
    pub generator_hash: Option<String>,
}

impl PersonMask {
    pub fn norm_l2_255(&self) -> f64 {
        self.mask.norm_l2_255()
    }
}

/// Mean of the generator's perturbations over one identity's images.
pub fn aggregate_mask(gen: &GeneratorModel, identity: &str, images: &[FaceImage]) -> Result<PersonMask> {
    if images.is_empty() {
        return Err(Error::precondition(format!("no images to build a mask for {identity}")));
    }
    let perts = images.iter().map(|x| generate(gen, x)).collect::<Result<Vec<_>>>()?;
    Ok(PersonMask {
        identity: identity.to_string(),
        mask: PerturbationMap::mean(&perts)?,
        n_images: images.len(),
        method: "advcloak".into(),
        generator_hash: Some(gen.content_hash()?),
    })
}

fn clip_unit(t: &Tensor) -> Result<Tensor> {
    Ok(t.clamp(0.0, 1.0)?)
}

struct StepOutput {
    record: StepRecord,
    g_loss: Tensor,
    d_loss: Tensor,
}

/// Terms for one stage-I batch.
fn stage1_terms(
    gen: &GeneratorModel,
    disc: &DiscriminatorModel,
    disc_frozen: &DiscriminatorModel,
    embedder: &dyn FeatureExtractor,
    x: &Tensor,
    w: &LossWeights,
) -> Result<StepOutput> {
    let p = gen.forward(x)?;
    let fake = clip_unit(&(x + &p)?)?;
    let g_side = gan_terms(disc_frozen, x, &fake, None)?;
    let norm = norm_hinge(&p, w.epsilon, None)?;
    let clean = embedder.features(x)?;
    let adv_rows = adv_distance_rows(&embedder.features(&fake)?, &clean, None, HullTarget::Renormalized, &SolverOptions::default())?;
    let adv = adv_rows.mean_all()?;
    let g_loss = assemble(&g_side.gen, &norm, &adv, w)?;
    let d_side = gan_terms(disc, x, &fake.detach(), None)?;
    let record = StepRecord {
        stage: Stage::I,
        epoch: 0,
        step: 0,
        gan_gen: scalar(&g_side.gen)?,
        gan_disc: scalar(&d_side.disc)?,
        norm: scalar(&norm)?,
        adv: scalar(&adv)?,
        total: scalar(&g_loss)?,
        mean_norm_255: scalar(&norms_255(&p)?.mean_all()?)?,
        validation: None,
    };
    Ok(StepOutput {
        record,
        g_loss,
        d_loss: d_side.disc.neg()?,
    })
}

/// Evaluates the stage-I terms of a batch without updating anything; used to
/// audit logged values against checkpointed parameters.
pub fn stage1_step_terms(
    gen: &GeneratorModel,
    disc: &DiscriminatorModel,
    embedder: &EmbedderModel,
    images: &[FaceImage],
    w: &LossWeights,
) -> Result<StepRecord> {
    let x = images_to_tensor(images, gen.store().dtype())?;
    let emb = embedder.frozen()?;
    Ok(stage1_terms(gen, disc, &disc.frozen()?, &emb, &x, w)?.record)
}

fn check_dtypes(gen: &GeneratorModel, disc: &DiscriminatorModel, embedder: &EmbedderModel) -> Result<()> {
    let d = gen.store().dtype();
    if disc.store().dtype() != d || embedder.store().dtype() != d {
        return Err(Error::precondition("generator, discriminator and embedder must share a dtype"));
    }
    Ok(())
}

fn check_step(record: &StepRecord, epoch: usize, step: usize) -> Result<()> {
    let vals = [record.gan_gen, record.gan_disc, record.norm, record.adv, record.total];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("stage {} loss", record.stage),
            epoch,
            step,
        });
    }
    Ok(())
}

/// The stage-I batch schedule: image indices per step, per epoch.
pub fn stage1_batches(n_images: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n_images).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

/// Image-specific training from freshly initialised networks.
pub fn train_stage1(
    corpus: &IdentityCorpus,
    embedder: &EmbedderModel,
    config: &StageIConfig,
    hooks: &mut dyn TrainingHooks,
) -> Result<(GeneratorModel, DiscriminatorModel, TrainingLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::precondition("stage I needs a non-empty corpus"));
    }
    let dtype = embedder.store().dtype();
    let mut gen = GeneratorModel::init(&config.generator, corpus.shape(), dtype)?;
    gen.epsilon = config.epsilon;
    let disc = DiscriminatorModel::init(&config.discriminator, corpus.shape(), dtype)?;
    check_dtypes(&gen, &disc, embedder)?;
    let images: Vec<FaceImage> = corpus.labelled_images().into_iter().map(|(_, x)| x.clone()).collect();
    let emb = embedder.frozen()?;
    let w = config.weights();
    let mut g_opt = adam(gen.store().vars(), config.learning_rate, config.adam_betas)?;
    let mut d_opt = adam(disc.store().vars(), config.learning_rate, config.adam_betas)?;
    let disc_frozen = disc.frozen()?;
    let mut log = TrainingLog::default();
    let mut step = 0;
    for (epoch, batches) in stage1_batches(images.len(), config.batch_size, config.epochs, config.seed)
        .into_iter()
        .enumerate()
    {
        for idx in batches {
            let batch: Vec<FaceImage> = idx.iter().map(|&i| images[i].clone()).collect();
            let x = images_to_tensor(&batch, dtype)?;
            hooks.on_step_start(step, &gen, &disc)?;
            let out = stage1_terms(&gen, &disc, &disc_frozen, &emb, &x, &w).map_err(|e| e.at_step(epoch, step))?;
            let mut record = out.record;
            record.epoch = epoch;
            record.step = step;
            check_step(&record, epoch, step)?;
            g_opt.backward_step(&out.g_loss)?;
            d_opt.backward_step(&out.d_loss)?;
            if config.validate_every > 0 && (step + 1) % config.validate_every == 0 {
                record.validation = hooks.validate(&gen)?;
            }
            log.push(record)?;
            step += 1;
        }
    }
    Ok((gen, disc, log))
}

/// Identity-level batches for stage II: per step, `(identity index, image indices)`.
pub fn stage2_batches(
    counts: &[usize],
    n_per_identity: usize,
    identities_per_batch: usize,
    epochs: usize,
    seed: u64,
) -> Vec<Vec<Vec<(usize, Vec<usize>)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut ids: Vec<usize> = (0..counts.len()).collect();
            ids.shuffle(&mut rng);
            ids.chunks(identities_per_batch.max(1))
                .map(|chunk| {
                    chunk
                        .iter()
                        .map(|&k| {
                            let mut imgs: Vec<usize> = (0..counts[k]).collect();
                            imgs.shuffle(&mut rng);
                            imgs.truncate(n_per_identity);
                            imgs.sort_unstable();
                            (k, imgs)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Feature hulls built once per identity from all of its (clean) images.
pub fn identity_hulls(
    corpus: &IdentityCorpus,
    embedder: &dyn FeatureExtractor,
    kind: crate::subspace::HullKind,
) -> Result<BTreeMap<String, FeatureHull>> {
    let mut hulls = BTreeMap::new();
    for (id, rec) in corpus.iter() {
        let feats = embed_all(embedder, &rec.images)?;
        hulls.insert(id.to_string(), build_hull(id, &feats, kind)?);
    }
    Ok(hulls)
}

struct Stage2Batch<'a> {
    x: Tensor,
    counts: Vec<usize>,
    hulls: Vec<&'a FeatureHull>,
}

fn stage2_terms(
    gen: &GeneratorModel,
    disc: &DiscriminatorModel,
    disc_frozen: &DiscriminatorModel,
    embedder: &dyn FeatureExtractor,
    batch: &Stage2Batch<'_>,
    config: &StageIIConfig,
) -> Result<StepOutput> {
    let w = config.weights();
    let x = &batch.x;
    let (total, c, h, wd) = x.dims4()?;
    let k = batch.counts.len();
    let n = batch.counts[0];
    if batch.counts.iter().any(|&m| m != n) || k * n != total {
        return Err(Error::precondition("stage II batches need the same image count per identity"));
    }
    let p = gen.forward(x)?;
    let masks = p.reshape((k, n, c, h, wd))?.mean(1)?;
    let repeated = masks
        .unsqueeze(1)?
        .broadcast_as((k, n, c, h, wd))?
        .reshape((total, c, h, wd))?;
    let fake = clip_unit(&(x + repeated)?)?;
    let weights = group_weights(&batch.counts, x.dtype())?;
    let g_side = gan_terms(disc_frozen, x, &fake, Some(&weights))?;
    let norm = norm_hinge(&masks, w.epsilon, None)?;
    let adv_feats = embedder.features(&fake)?;
    let rows = match config.adv_kind.hull_kind() {
        None => adv_distance_rows(&adv_feats, &embedder.features(x)?, None, config.hull_target, &SolverOptions::default())?,
        Some(_) => adv_distance_rows(&adv_feats, &adv_feats, Some(&batch.hulls), config.hull_target, &SolverOptions::default())?,
    };
    let adv = (rows * &weights)?.sum_all()?;
    let g_loss = assemble(&g_side.gen, &norm, &adv, &w)?;
    let d_side = gan_terms(disc, x, &fake.detach(), Some(&weights))?;
    let record = StepRecord {
        stage: Stage::II,
        epoch: 0,
        step: 0,
        gan_gen: scalar(&g_side.gen)?,
        gan_disc: scalar(&d_side.disc)?,
        norm: scalar(&norm)?,
        adv: scalar(&adv)?,
        total: scalar(&g_loss)?,
        mean_norm_255: scalar(&norms_255(&masks)?.mean_all()?)?,
        validation: None,
    };
    Ok(StepOutput {
        record,
        g_loss,
        d_loss: d_side.disc.neg()?,
    })
}

/// Person-specific fine-tuning, warm-started from stage-I models.
pub fn train_stage2(
    corpus: &IdentityCorpus,
    embedder: &EmbedderModel,
    init: (&GeneratorModel, &DiscriminatorModel),
    config: &StageIIConfig,
    hooks: &mut dyn TrainingHooks,
) -> Result<(GeneratorModel, DiscriminatorModel, TrainingLog)> {
    config.validate()?;
    let short: Vec<String> = corpus
        .iter()
        .filter(|(_, r)| r.images.len() < config.n_per_identity)
        .map(|(id, r)| format!("{id} ({} images)", r.images.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientImages(short));
    }
    if corpus.is_empty() {
        return Err(Error::precondition("stage II needs a non-empty corpus"));
    }
    let mut gen = init.0.fork(Stage::II)?;
    gen.epsilon = config.epsilon;
    let disc = init.1.fork(Stage::II)?;
    check_dtypes(&gen, &disc, embedder)?;
    let dtype = gen.store().dtype();
    let emb = embedder.frozen()?;
    let records: Vec<(&str, &crate::dataio::IdentityRecord)> = corpus.iter().collect();
    let hulls = match config.adv_kind.hull_kind() {
        Some(kind) => identity_hulls(corpus, &emb, kind)?,
        None => BTreeMap::new(),
    };
    let counts: Vec<usize> = records.iter().map(|(_, r)| r.images.len()).collect();
    let mut g_opt = adam(gen.store().vars(), config.learning_rate, config.adam_betas)?;
    let mut d_opt = adam(disc.store().vars(), config.learning_rate, config.adam_betas)?;
    let disc_frozen = disc.frozen()?;
    let mut log = TrainingLog::default();
    let mut step = 0;
    let schedule = stage2_batches(&counts, config.n_per_identity, config.identities_per_batch, config.epochs, config.seed);
    for (epoch, batches) in schedule.into_iter().enumerate() {
        for groups in batches {
            let mut images = Vec::new();
            let mut group_counts = Vec::new();
            let mut group_hulls = Vec::new();
            for (k, idx) in &groups {
                let (id, rec) = records[*k];
                images.extend(idx.iter().map(|&i| rec.images[i].clone()));
                group_counts.push(idx.len());
                if let Some(h) = hulls.get(id) {
                    group_hulls.extend(std::iter::repeat(h).take(idx.len()));
                }
            }
            let batch = Stage2Batch {
                x: images_to_tensor(&images, dtype)?,
                counts: group_counts,
                hulls: group_hulls,
            };
            hooks.on_step_start(step, &gen, &disc)?;
            let out = stage2_terms(&gen, &disc, &disc_frozen, &emb, &batch, config).map_err(|e| e.at_step(epoch, step))?;
            let mut record = out.record;
            record.epoch = epoch;
            record.step = step;
            check_step(&record, epoch, step)?;
            g_opt.backward_step(&out.g_loss)?;
            d_opt.backward_step(&out.d_loss)?;
            if config.validate_every > 0 && (step + 1) % config.validate_every == 0 {
                record.validation = hooks.validate(&gen)?;
            }
            log.push(record)?;
            step += 1;
        }
    }
    Ok((gen, disc, log))
}

/// Mean cosine distance between clean and perturbed features over `images`,
/// each image carrying its own perturbation.
pub fn mean_adv_distance(gen: &GeneratorModel, embedder: &dyn FeatureExtractor, images: &[FaceImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::precondition("no images to evaluate"));
    }
    let x = images_to_tensor(images, gen.store().dtype())?;
    let fake = clip_unit(&(&x + gen.forward(&x)?)?)?;
    let rows = adv_distance_rows(
        &embedder.features(&fake.to_dtype(embedder.dtype())?)?,
        &embedder.features(&x.to_dtype(embedder.dtype())?)?,
        None,
        HullTarget::Renormalized,
        &SolverOptions::default(),
    )?;
    scalar(&rows.mean_all()?)
}

/// Mean perturbation norm (0-255 scale) of the generator over `images`.
pub fn mean_perturbation_norm(gen: &GeneratorModel, images: &[FaceImage]) -> Result<f64> {
    let x = images_to_tensor(images, gen.store().dtype())?;
    scalar(&norms_255(&gen.forward(&x)?)?.mean_all()?)
}

//! End-to-end driver: data, recognition models, two-stage cloak training,
//! masks for every configured method, and the protection report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advnet::{DiscriminatorModel, GeneratorModel};
use crate::artifact::{save_discriminator, save_embedder, save_generator, save_mask, CODE_VERSION};
use crate::baselines::{advfaces_plus, fi_uap, random_noise_mask, FiUapConfig};
use crate::config::{Method, RunConfig};
use crate::dataio::{load_corpus, split_corpus, synth_corpus, CorpusSplit, IdentityCorpus, SplitSpec};
use crate::embedder::{train_embedder, EmbedderModel};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate_masks, ProtectionReport, TargetModel, REPORT_SCHEMA_VERSION};
use crate::trainer::{aggregate_mask, train_stage1, train_stage2, NoHooks, PersonMask, TrainingLog};

/// Pins numeric kernels to one thread. Candle reads the variable on every
/// call, so this takes effect immediately.
pub fn enable_deterministic_mode() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
}

/// Every corpus the pipeline needs, with disjoint identities.
pub struct PreparedData {
    pub recognition: IdentityCorpus,
    pub cloak: IdentityCorpus,
    pub split: CorpusSplit,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let shape = d.shape();
    let corpus = match &d.root {
        Some(root) => load_corpus(root, shape)?,
        None => synth_corpus(d.synth_identities, d.synth_images_per_identity, shape, d.synth_seed)?,
    };
    let mut ids: Vec<&str> = corpus.ids().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(d.partition_seed));
    let n_rec = d.recognition_identities;
    let n_cloak = d.cloak_identities;
    if n_rec + n_cloak + d.n_distractors >= ids.len() {
        return Err(Error::precondition(format!(
            "{} identities cannot cover {n_rec} recognition, {n_cloak} cloak and {} distractor identities plus evaluation",
            ids.len(),
            d.n_distractors
        )));
    }
    let recognition = corpus.subset(ids[..n_rec].iter().copied())?;
    let cloak = corpus.subset(ids[n_rec..n_rec + n_cloak].iter().copied())?;
    let rest = corpus.subset(ids[n_rec + n_cloak..].iter().copied())?;
    let split = split_corpus(
        &rest,
        &SplitSpec {
            n_inference: d.n_inference,
            n_test: d.n_test,
            n_distractors: d.n_distractors,
            seed: d.partition_seed,
        },
    )?;
    Ok(PreparedData {
        recognition,
        cloak,
        split,
    })
}

pub fn train_embedders(cfg: &RunConfig, data: &PreparedData) -> Result<BTreeMap<String, EmbedderModel>> {
    cfg.embedders
        .iter()
        .map(|(name, ec)| {
            let m = train_embedder(&data.recognition, ec).map_err(|e| e.in_stage(format!("embedder `{name}`")))?;
            Ok((name.clone(), m))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSummary {
    pub name: String,
    pub training_accuracy: Option<f64>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub source: String,
    pub norm_l2_255: f64,
    pub evaluation_identities: usize,
    pub embedders: Vec<EmbedderSummary>,
    /// Content hashes of the generators whose masks were evaluated.
    pub generators: BTreeMap<String, String>,
    pub methods: Vec<ProtectionReport>,
}

impl RunReport {
    pub fn method(&self, name: &str) -> Option<&ProtectionReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Plain-text table: one row per method, one column per target model.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let models: Vec<&str> = self
            .methods
            .first()
            .map(|m| m.rows.iter().map(|r| r.model.as_str()).collect())
            .unwrap_or_default();
        out.push_str(&format!("{:<18}", "method"));
        for m in &models {
            out.push_str(&format!("{:>12}", format!("{m} T1/T5")));
        }
        out.push_str(&format!("{:>12}{:>8}\n", "avg T1/T5", "SSIM"));
        for r in &self.methods {
            out.push_str(&format!("{:<18}", r.method));
            for row in &r.rows {
                out.push_str(&format!("{:>12}", format!("{:.1}/{:.1}", row.top1_psr, row.top5_psr)));
            }
            out.push_str(&format!(
                "{:>12}{:>8.3}\n",
                format!("{:.1}/{:.1}", r.average_top1(), r.average_top5()),
                r.mean_ssim
            ));
        }
        out
    }
}

/// Trained cloak generators, keyed by what produced them.
pub struct CloakModels {
    pub stage1: GeneratorModel,
    pub discriminator1: DiscriminatorModel,
    pub stage1_log: TrainingLog,
    pub stage2: BTreeMap<&'static str, (GeneratorModel, TrainingLog)>,
}

/// Trains stage I, then one stage-II generator per AdvCloak objective in the method list.
pub fn train_cloaks(cfg: &RunConfig, data: &PreparedData, source: &EmbedderModel) -> Result<CloakModels> {
    let (g1, d1, log1) =
        train_stage1(&data.cloak, source, &cfg.stage1, &mut NoHooks).map_err(|e| e.in_stage("stage I training"))?;
    let mut stage2 = BTreeMap::new();
    for m in &cfg.eval.methods {
        if let Method::AdvCloak(kind) = *m {
            if stage2.contains_key(kind.name()) {
                continue;
            }
            let s2 = crate::trainer::StageIIConfig {
                adv_kind: kind,
                ..cfg.stage2.clone()
            };
            let (g2, _, log2) = train_stage2(&data.cloak, source, (&g1, &d1), &s2, &mut NoHooks)
                .map_err(|e| e.in_stage(format!("stage II training ({})", kind.name())))?;
            stage2.insert(kind.name(), (g2, log2));
        }
    }
    Ok(CloakModels {
        stage1: g1,
        discriminator1: d1,
        stage1_log: log1,
        stage2,
    })
}

/// One mask per evaluation identity, crafted from its inference images.
pub fn craft_masks(
    cfg: &RunConfig,
    method: Method,
    inference: &IdentityCorpus,
    source: &EmbedderModel,
    cloaks: Option<&CloakModels>,
) -> Result<BTreeMap<String, PersonMask>> {
    let need_gen = || cloaks.ok_or_else(|| Error::precondition(format!("{method} needs trained generators")));
    let mut out = BTreeMap::new();
    for (i, (id, rec)) in inference.iter().enumerate() {
        let per_id_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mask = match method {
            Method::AdvCloak(kind) => {
                let (g, _) = need_gen()?
                    .stage2
                    .get(kind.name())
                    .ok_or_else(|| Error::precondition(format!("no stage-II generator for {method}")))?;
                let mut m = aggregate_mask(g, id, &rec.images)?;
                m.method = method.name();
                m
            }
            Method::AdvFacesPlus => advfaces_plus(&need_gen()?.stage1, id, &rec.images)?,
            Method::FiUap | Method::Opom(_) => {
                let fc = FiUapConfig {
                    hull_kind: match method {
                        Method::Opom(k) => Some(k),
                        _ => None,
                    },
                    seed: cfg.eval.fi_uap.seed ^ per_id_seed,
                    ..cfg.eval.fi_uap.clone()
                };
                fi_uap(id, &rec.images, source, &fc)?
            }
            Method::RandomNoise => random_noise_mask(id, inference.shape(), per_id_seed)?,
        };
        out.insert(id.to_string(), mask);
    }
    Ok(out)
}

/// A report together with what produced it.
pub struct RunOutput {
    pub report: RunReport,
    /// Masks by method name, then identity.
    pub masks: BTreeMap<String, BTreeMap<String, PersonMask>>,
    pub cloaks: Option<CloakModels>,
}

/// Cloak training, mask crafting and evaluation with already trained
/// recognition models. Artifacts go to `out_dir` when given.
pub fn run_methods(
    cfg: &RunConfig,
    data: &PreparedData,
    embedders: &BTreeMap<String, EmbedderModel>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let source = embedders
        .get(&cfg.eval.source)
        .ok_or_else(|| Error::Config(format!("source embedder `{}` is not available", cfg.eval.source)))?;
    let config_hash = cfg.hash();
    let cloaks = if cfg.eval.methods.iter().any(Method::uses_generator) {
        Some(train_cloaks(cfg, data, source)?)
    } else {
        None
    };
    let mut generators = BTreeMap::new();
    if let Some(c) = &cloaks {
        generators.insert("stage1".to_string(), c.stage1.content_hash()?);
        for (kind, (g, _)) in &c.stage2 {
            generators.insert(format!("stage2-{kind}"), g.content_hash()?);
        }
        if let Some(dir) = out_dir {
            save_cloaks(dir, c, &config_hash)?;
        }
    }
    let targets = embedders
        .iter()
        .map(|(name, m)| TargetModel::new(name.clone(), m, &data.split.distractors))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("gallery construction"))?;
    let norm = cfg.norm_l2_255();
    let mut methods = Vec::new();
    let mut all_masks = BTreeMap::new();
    for &method in &cfg.eval.methods {
        let masks = craft_masks(cfg, method, &data.split.inference, source, cloaks.as_ref())
            .map_err(|e| e.in_stage(format!("masks ({method})")))?;
        if let Some(dir) = out_dir {
            for (id, m) in &masks {
                save_mask(&dir.join("masks").join(method.name()).join(format!("{id}.mask")), m, Some(&config_hash))?;
            }
        }
        let report = evaluate_masks(&method.name(), &masks, &data.split.test, &targets, norm, None)
            .map_err(|e| e.in_stage(format!("evaluation ({method})")))?;
        methods.push(report);
        all_masks.insert(method.name(), masks);
    }
    let embedder_summaries = embedders
        .iter()
        .map(|(name, m)| {
            Ok(EmbedderSummary {
                name: name.clone(),
                training_accuracy: m.training_accuracy(),
                content_hash: m.content_hash()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash,
        code_version: CODE_VERSION.into(),
        seed: cfg.seed,
        source: cfg.eval.source.clone(),
        norm_l2_255: norm,
        evaluation_identities: data.split.test.len(),
        embedders: embedder_summaries,
        generators,
        methods,
    };
    Ok(RunOutput {
        report,
        masks: all_masks,
        cloaks,
    })
}

fn save_cloaks(dir: &Path, c: &CloakModels, config_hash: &str) -> Result<()> {
    save_generator(&dir.join("generator_stage1.ckpt"), &c.stage1, Some(config_hash))?;
    save_discriminator(&dir.join("discriminator_stage1.ckpt"), &c.discriminator1, Some(config_hash))?;
    c.stage1_log.save(&dir.join("stage1_log.jsonl"))?;
    for (kind, (g, log)) in &c.stage2 {
        save_generator(&dir.join(format!("generator_stage2_{kind}.ckpt")), g, Some(config_hash))?;
        log.save(&dir.join(format!("stage2_{kind}_log.jsonl")))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full reproduction run. With an output directory the resolved config, split
/// manifest, checkpoints, masks, logs and `report.json` are written there.
pub fn run_end_to_end(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.deterministic {
        enable_deterministic_mode();
    }
    let cfg = cfg.with_seed(cfg.seed);
    let out_dir: Option<PathBuf> = cfg.out_dir.clone();
    let data = prepare_data(&cfg).map_err(|e| e.in_stage("data preparation"))?;
    let embedders = train_embedders(&cfg, &data)?;
    if let Some(dir) = &out_dir {
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        write_text(&dir.join("split.json"), &data.split.manifest.to_json())?;
        for (name, m) in &embedders {
            save_embedder(&dir.join("embedders").join(format!("{name}.ckpt")), m, Some(&cfg.hash()))?;
        }
    }
    let report = run_methods(&cfg, &data, &embedders, out_dir.as_deref())?.report;
    if let Some(dir) = &out_dir {
        write_text(&dir.join("report.json"), &report.to_json())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{Arch, EmbedderConfig};

    pub(crate) fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.height = 16;
        c.data.width = 16;
        c.data.synth_identities = 14;
        c.data.synth_images_per_identity = 6;
        c.data.recognition_identities = 4;
        c.data.cloak_identities = 3;
        c.data.n_inference = 3;
        c.data.n_test = 3;
        c.data.n_distractors = 3;
        c.embedders = BTreeMap::from([(
            "softmax".to_string(),
            EmbedderConfig {
                arch: Arch::SmallCnnA,
                dim: 16,
                epochs: 1,
                ..Default::default()
            },
        )]);
        c.stage1.epochs = 1;
        c.stage1.batch_size = 8;
        c.stage1.generator.base_channels = 4;
        c.stage1.discriminator.base_channels = 4;
        c.stage2.epochs = 1;
        c.stage2.n_per_identity = 4;
        c.stage2.identities_per_batch = 2;
        c.eval.fi_uap.iterations = 2;
        c
    }

    #[test]
    fn partitions_are_disjoint() {
        let c = tiny_config();
        let d = prepare_data(&c).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for corpus in [&d.recognition, &d.cloak, &d.split.test, &d.split.distractors] {
            for id in corpus.ids() {
                assert!(seen.insert(id.to_string()), "{id} appears twice");
            }
        }
        assert_eq!(d.split.test.len(), 14 - 4 - 3 - 3);
        let mut bad = c.clone();
        bad.data.synth_identities = 10;
        assert!(prepare_data(&bad).is_err());
    }

    #[test]
    fn end_to_end_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config();
        c.out_dir = Some(dir.path().to_path_buf());
        let r = run_end_to_end(&c).unwrap();
        assert_eq!(r.methods.len(), c.eval.methods.len());
        assert!(r.methods.iter().all(|m| m.rows.len() == 1 && m.rows[0].pair_count == 4 * 3 * 2));
        assert!(r.table().contains("advcloak-convex"));
        for f in ["report.json", "config.toml", "split.json", "generator_stage1.ckpt", "generator_stage2_convex.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let mask = crate::artifact::load_mask(&dir.path().join("masks/advcloak").join(format!(
            "{}.mask",
            prepare_data(&c).unwrap().split.test.ids().next().unwrap()
        )))
        .unwrap();
        assert_eq!(mask.mask.generator_hash.as_deref(), r.generators.get("stage2-plain").map(String::as_str));
        assert_eq!(mask.config_hash.as_deref(), Some(r.config_hash.as_str()));
        let back: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

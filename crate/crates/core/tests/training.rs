use std::collections::BTreeMap;

use advcloak::advnet::{generate, DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel, PerturbationMap, Stage};
use advcloak::dataio::{synth_corpus, FaceImage, IdentityCorpus, ImageShape};
use advcloak::embedder::{train_embedder, Arch, EmbedderConfig, EmbedderModel};
use advcloak::losses::{scaled_epsilon, AdvObjectiveKind};
use advcloak::trainer::*;
use advcloak::Error;
use candle_core::{DType, Tensor};

fn shape() -> ImageShape {
    ImageShape::new(16, 16, 3)
}

fn small_gen() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        ..Default::default()
    }
}

fn small_disc() -> DiscriminatorConfig {
    DiscriminatorConfig {
        base_channels: 4,
        ..Default::default()
    }
}

fn corpus(ids: usize, per: usize, seed: u64) -> IdentityCorpus {
    synth_corpus(ids, per, shape(), seed).unwrap()
}

fn embedder(c: &IdentityCorpus, epochs: usize) -> EmbedderModel {
    train_embedder(
        c,
        &EmbedderConfig {
            arch: Arch::SmallCnnA,
            dim: 16,
            epochs,
            ..Default::default()
        },
    )
    .unwrap()
}

fn stage1_cfg(epochs: usize) -> StageIConfig {
    StageIConfig {
        epochs,
        batch_size: 8,
        epsilon: scaled_epsilon(shape()),
        generator: small_gen(),
        discriminator: small_disc(),
        ..Default::default()
    }
}

fn images_of(c: &IdentityCorpus) -> Vec<FaceImage> {
    c.iter().flat_map(|(_, r)| r.images.clone()).collect()
}

fn max_abs_diff(a: &PerturbationMap, b: &PerturbationMap) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn aggregation_identities() {
    let g = GeneratorModel::init(&GeneratorConfig { output_init: 0.05, ..small_gen() }, shape(), DType::F32).unwrap();
    let imgs = images_of(&corpus(1, 6, 3));
    let one = aggregate_mask(&g, "a", &imgs[..1]).unwrap();
    assert_eq!(one.mask, generate(&g, &imgs[0]).unwrap());
    assert_eq!(one.n_images, 1);
    assert_eq!(one.generator_hash, Some(g.content_hash().unwrap()));
    let twice = aggregate_mask(&g, "a", &[imgs[2].clone(), imgs[2].clone()]).unwrap();
    assert_eq!(twice.mask, generate(&g, &imgs[2]).unwrap());
    let all = aggregate_mask(&g, "a", &imgs).unwrap();
    let a = aggregate_mask(&g, "a", &imgs[..3]).unwrap();
    let b = aggregate_mask(&g, "a", &imgs[3..]).unwrap();
    let halves = PerturbationMap::mean(&[a.mask, b.mask]).unwrap();
    assert!(max_abs_diff(&all.mask, &halves) < 1e-7);
    assert!(matches!(aggregate_mask(&g, "a", &[]), Err(Error::Precondition(_))));
}

#[test]
fn batch_schedules() {
    let s = stage1_batches(10, 4, 3, 7);
    assert_eq!(s, stage1_batches(10, 4, 3, 7));
    assert_ne!(s, stage1_batches(10, 4, 3, 8));
    for epoch in &s {
        let mut seen: Vec<usize> = epoch.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }
    let s2 = stage2_batches(&[20, 18, 16, 30, 17], 16, 2, 2, 1);
    for epoch in &s2 {
        let mut ids: Vec<usize> = epoch.iter().flatten().map(|(k, _)| *k).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        for (_, idx) in epoch.iter().flatten() {
            assert_eq!(idx.len(), 16);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

fn record(step: usize, adv: f64) -> StepRecord {
    StepRecord {
        stage: Stage::I,
        epoch: 0,
        step,
        gan_gen: 0.7,
        gan_disc: -1.3,
        norm: 3.0,
        adv,
        total: 1.0,
        mean_norm_255: 2.0,
        validation: None,
    }
}

#[test]
fn training_log_checks_and_round_trips() {
    let mut log = TrainingLog::default();
    log.push(record(0, 0.1)).unwrap();
    log.push(StepRecord {
        validation: Some(42.0),
        ..record(1, 0.2)
    })
    .unwrap();
    assert!(log.push(record(1, 0.3)).is_err());
    assert!(matches!(log.push(record(2, f64::NAN)), Err(Error::NonFinite { step: 2, .. })));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    log.save(&p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    assert_eq!(TrainingLog::load(&p).unwrap(), log);
}

/// Snapshots parameters at chosen steps.
struct Snapshots {
    at: Vec<usize>,
    taken: BTreeMap<usize, (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)>,
}

impl TrainingHooks for Snapshots {
    fn on_step_start(&mut self, step: usize, gen: &GeneratorModel, disc: &DiscriminatorModel) -> advcloak::Result<()> {
        if self.at.contains(&step) {
            self.taken.insert(step, (gen.store().snapshot()?, disc.store().snapshot()?));
        }
        Ok(())
    }
}

#[test]
fn stage1_is_deterministic_and_auditable() {
    let c = corpus(4, 6, 1);
    let emb = embedder(&c, 1);
    let emb_hash = emb.content_hash().unwrap();
    let cfg = stage1_cfg(2);
    let mut hooks = Snapshots {
        at: vec![0, 3, 5],
        taken: BTreeMap::new(),
    };
    let (g, d, log) = train_stage1(&c, &emb, &cfg, &mut hooks).unwrap();
    assert_eq!(log.records.len(), 2 * 3);
    assert!(log.records.iter().all(|r| r.stage == Stage::I));
    assert_eq!(g.stage(), Stage::I);
    let (g2, d2, log2) = train_stage1(&c, &emb, &cfg, &mut NoHooks).unwrap();
    assert_eq!(g.content_hash().unwrap(), g2.content_hash().unwrap());
    assert_eq!(d.store().content_hash().unwrap(), d2.store().content_hash().unwrap());
    assert_eq!(log, log2);
    assert_eq!(emb.content_hash().unwrap(), emb_hash);

    // Logged terms equal a recomputation from the parameters the step started with.
    let images: Vec<FaceImage> = c.labelled_images().into_iter().map(|(_, x)| x.clone()).collect();
    let schedule: Vec<Vec<usize>> = stage1_batches(images.len(), cfg.batch_size, cfg.epochs, cfg.seed)
        .into_iter()
        .flatten()
        .collect();
    let mut probe_g = GeneratorModel::init(&cfg.generator, shape(), DType::F32).unwrap();
    probe_g.epsilon = cfg.epsilon;
    let probe_d = DiscriminatorModel::init(&cfg.discriminator, shape(), DType::F32).unwrap();
    for (step, (gs, ds)) in &hooks.taken {
        probe_g.store().restore(gs).unwrap();
        probe_d.store().restore(ds).unwrap();
        let batch: Vec<FaceImage> = schedule[*step].iter().map(|&i| images[i].clone()).collect();
        let r = stage1_step_terms(&probe_g, &probe_d, &emb, &batch, &cfg.weights()).unwrap();
        let logged = &log.records[*step];
        for (a, b) in [
            (r.gan_gen, logged.gan_gen),
            (r.gan_disc, logged.gan_disc),
            (r.norm, logged.norm),
            (r.adv, logged.adv),
            (r.total, logged.total),
        ] {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "step {step}: {a} vs {b}");
        }
    }
    assert_eq!(hooks.taken.len(), 3);
}

#[test]
fn stage2_contract() {
    let c = corpus(4, 6, 2);
    let emb = embedder(&c, 1);
    let emb_hash = emb.content_hash().unwrap();
    let (g1, d1, _) = train_stage1(&c, &emb, &stage1_cfg(1), &mut NoHooks).unwrap();
    let base = StageIIConfig {
        n_per_identity: 4,
        identities_per_batch: 2,
        epochs: 0,
        ..Default::default()
    };
    let (g, d, log) = train_stage2(&c, &emb, (&g1, &d1), &base, &mut NoHooks).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(g.stage(), Stage::II);
    assert_eq!(g.content_hash().unwrap(), g1.content_hash().unwrap());
    assert_eq!(d.store().content_hash().unwrap(), d1.store().content_hash().unwrap());
    for kind in [AdvObjectiveKind::Plain, AdvObjectiveKind::Affine, AdvObjectiveKind::Center, AdvObjectiveKind::Convex] {
        let cfg = StageIIConfig {
            epochs: 1,
            adv_kind: kind,
            ..base.clone()
        };
        let (g, _, log) = train_stage2(&c, &emb, (&g1, &d1), &cfg, &mut NoHooks).unwrap();
        assert_eq!(log.records.len(), 2, "{kind:?}");
        assert!(log.records.iter().all(|r| r.stage == Stage::II && r.adv >= 0.0));
        assert_ne!(g.content_hash().unwrap(), g1.content_hash().unwrap());
        let again = train_stage2(&c, &emb, (&g1, &d1), &cfg, &mut NoHooks).unwrap().0;
        assert_eq!(g.content_hash().unwrap(), again.content_hash().unwrap());
    }
    assert_eq!(emb.content_hash().unwrap(), emb_hash);
    let too_many = StageIIConfig {
        n_per_identity: 7,
        ..base.clone()
    };
    match train_stage2(&c, &emb, (&g1, &d1), &too_many, &mut NoHooks) {
        Err(Error::InsufficientImages(list)) => assert_eq!(list.len(), 4),
        other => panic!("expected InsufficientImages, got {:?}", other.map(|_| ())),
    }
    let hull_single = StageIIConfig {
        n_per_identity: 1,
        adv_kind: AdvObjectiveKind::Convex,
        ..base
    };
    assert!(train_stage2(&c, &emb, (&g1, &d1), &hull_single, &mut NoHooks).is_err());
}

#[test]
fn stage1_learns_adversarial_perturbations() {
    let train = corpus(12, 12, 5);
    let emb = embedder(&train, 4);
    let held = images_of(&synth_corpus(20, 2, shape(), 99).unwrap());
    let cfg = StageIConfig {
        epochs: 6,
        batch_size: 16,
        ..stage1_cfg(0)
    };
    let untrained = GeneratorModel::init(&cfg.generator, shape(), DType::F32).unwrap();
    let before = mean_adv_distance(&untrained, &emb, &held).unwrap();
    let (g, _, _) = train_stage1(&train, &emb, &cfg, &mut NoHooks).unwrap();
    let after = mean_adv_distance(&g, &emb, &held).unwrap();
    let norm = mean_perturbation_norm(&g, &held).unwrap();
    println!("held-out adv distance {before:.3e} -> {after:.3e}; mean norm {norm:.1} (epsilon {:.1})", cfg.epsilon);
    assert!(after > 3.0 * before, "{after} vs {before}");
    assert!(norm <= 10.0 * cfg.epsilon);
}

//! Open-set 1:N identification, protection success rates, mask-norm
//! normalisation, SSIM and timing.
//!
//! For an identity with `m` test images, each image takes a turn as the clean
//! gallery enrolment while the other `m - 1` protected images probe a gallery
//! made of that enrolment plus every distractor image. A probe is identified
//! at Top-k when fewer than `k` distractors are strictly closer than its
//! enrolment.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::advnet::{apply_perturbation, PerturbationMap};
use crate::dataio::{FaceImage, IdentityCorpus, ImageShape};
use crate::embedder::{embed_all, Embedding, FeatureExtractor};
use crate::error::{Error, Result};
use crate::trainer::PersonMask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rescales a mask to an L2 norm of `target_l2_255` (0-255 scale).
pub fn normalize_mask(mask: &PersonMask, target_l2_255: f64) -> Result<PersonMask> {
    let norm = mask.norm_l2_255();
    if !(norm > 0.0) {
        return Err(Error::precondition(format!("mask for {} has zero norm", mask.identity)));
    }
    if !(target_l2_255 >= 0.0) {
        return Err(Error::precondition("target norm must be non-negative"));
    }
    Ok(PersonMask {
        mask: mask.mask.scaled(target_l2_255 / norm),
        ..mask.clone()
    })
}

/// The 1,200 full-scale norm budget (112x112x3) rescaled by the square root
/// of the pixel count of `shape`; about 343 at 32x32x3.
pub fn desk_norm_target(shape: ImageShape) -> f64 {
    1200.0 * (shape.len() as f64 / (112.0 * 112.0 * 3.0)).sqrt()
}

/// Distractor entries of a gallery, embedded once per model.
#[derive(Debug, Clone)]
pub struct Gallery {
    pub entries: Vec<(String, Embedding)>,
}

impl Gallery {
    pub fn build(model: &dyn FeatureExtractor, distractors: &IdentityCorpus) -> Result<Self> {
        let mut entries = Vec::new();
        for (id, rec) in distractors.iter() {
            for e in embed_all(model, &rec.images)? {
                entries.push((id.to_string(), e));
            }
        }
        Ok(Self { entries })
    }

    pub fn distractor_count(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentificationCounts {
    pub pairs: usize,
    pub identified_top1: usize,
    pub identified_top5: usize,
}

impl IdentificationCounts {
    pub fn top1_psr(&self) -> f64 {
        psr(self.identified_top1, self.pairs)
    }

    pub fn top5_psr(&self) -> f64 {
        psr(self.identified_top5, self.pairs)
    }
}

fn psr(identified: usize, pairs: usize) -> f64 {
    if pairs == 0 {
        return 0.0;
    }
    100.0 - 100.0 * identified as f64 / pairs as f64
}

fn euclid_sq(a: &Embedding, b: &Embedding) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Identification counts for one target model.
///
/// `masks` maps identity to its protection; identities without an entry are
/// probed unprotected.
pub fn run_identification(
    test: &IdentityCorpus,
    gallery: &Gallery,
    model: &dyn FeatureExtractor,
    masks: &BTreeMap<String, PerturbationMap>,
) -> Result<IdentificationCounts> {
    let short: Vec<String> = test
        .iter()
        .filter(|(_, r)| r.images.len() < 2)
        .map(|(id, r)| format!("{id} ({} images)", r.images.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientImages(short));
    }
    let mut counts = IdentificationCounts::default();
    for (id, rec) in test.iter() {
        let clean = embed_all(model, &rec.images)?;
        let probes = match masks.get(id) {
            Some(mask) => {
                let protected = rec
                    .images
                    .iter()
                    .map(|x| apply_perturbation(x, mask))
                    .collect::<Result<Vec<_>>>()?;
                embed_all(model, &protected)?
            }
            None => clean.clone(),
        };
        // squared Euclidean distance on unit vectors ranks like cosine distance
        for (j, enrolled) in clean.iter().enumerate() {
            for (i, probe) in probes.iter().enumerate() {
                if i == j {
                    continue;
                }
                let own = euclid_sq(probe, enrolled);
                let closer = gallery
                    .entries
                    .iter()
                    .filter(|(_, e)| euclid_sq(probe, e) < own)
                    .take(5)
                    .count();
                counts.pairs += 1;
                counts.identified_top1 += usize::from(closer < 1);
                counts.identified_top5 += usize::from(closer < 5);
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub top1_psr: f64,
    pub top5_psr: f64,
    pub pair_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Seconds to customise one person-specific mask.
    pub t1_mask_s: f64,
    /// Per-image cost once the mask exists; zero for person-specific masks.
    pub t2_per_image_s: f64,
}

/// Protection of one method against every target model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub method: String,
    pub rows: Vec<ModelRow>,
    pub mask_norm_l2_255: f64,
    pub mean_ssim: f64,
    /// Wall-clock costs, when measured. Left out of reproducible reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl ProtectionReport {
    pub fn average_top1(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.top1_psr))
    }

    pub fn average_top5(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.top5_psr))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// A target model with its prebuilt distractor gallery.
pub struct TargetModel<'a> {
    pub name: String,
    pub model: &'a dyn FeatureExtractor,
    pub gallery: Gallery,
}

impl<'a> TargetModel<'a> {
    pub fn new(name: impl Into<String>, model: &'a dyn FeatureExtractor, distractors: &IdentityCorpus) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            model,
            gallery: Gallery::build(model, distractors)?,
        })
    }
}

/// Normalises every mask to `norm_l2_255` and evaluates it on each target.
pub fn evaluate_masks(
    method: &str,
    masks: &BTreeMap<String, PersonMask>,
    test: &IdentityCorpus,
    targets: &[TargetModel<'_>],
    norm_l2_255: f64,
    timings: Option<Timings>,
) -> Result<ProtectionReport> {
    let scaled = scale_masks(masks, norm_l2_255)?;
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        let c = run_identification(test, &t.gallery, t.model, &scaled)?;
        rows.push(ModelRow {
            model: t.name.clone(),
            top1_psr: c.top1_psr(),
            top5_psr: c.top5_psr(),
            pair_count: c.pairs,
        });
    }
    Ok(ProtectionReport {
        method: method.to_string(),
        rows,
        mask_norm_l2_255: norm_l2_255,
        mean_ssim: mean_protected_ssim(test, &scaled)?,
        timings,
    })
}

fn scale_masks(masks: &BTreeMap<String, PersonMask>, norm: f64) -> Result<BTreeMap<String, PerturbationMap>> {
    masks
        .iter()
        .map(|(id, m)| {
            let mask = if norm == 0.0 {
                PerturbationMap::zeros(m.mask.shape())
            } else {
                normalize_mask(m, norm)?.mask
            };
            Ok((id.clone(), mask))
        })
        .collect()
}

/// Mean SSIM between test images and their protected versions.
pub fn mean_protected_ssim(test: &IdentityCorpus, masks: &BTreeMap<String, PerturbationMap>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (id, rec) in test.iter() {
        let Some(mask) = masks.get(id) else { continue };
        for x in &rec.images {
            total += compute_ssim(x, &apply_perturbation(x, mask)?)?;
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub norm_l2_255: f64,
    pub mean_ssim: f64,
    pub average_top1_psr: f64,
}

/// Protection and image quality of the same masks at several norms.
pub fn tradeoff_sweep(
    masks: &BTreeMap<String, PersonMask>,
    norms: &[f64],
    test: &IdentityCorpus,
    targets: &[TargetModel<'_>],
) -> Result<Vec<TradeoffPoint>> {
    if norms.iter().any(|&n| !(n >= 0.0)) || norms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::precondition("sweep norms must be non-negative and ascending"));
    }
    norms
        .iter()
        .map(|&norm| {
            let r = evaluate_masks("sweep", masks, test, targets, norm, None)?;
            Ok(TradeoffPoint {
                norm_l2_255: norm,
                mean_ssim: r.mean_ssim,
                average_top1_psr: r.average_top1(),
            })
        })
        .collect()
}

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// SSIM over uniform 8x8 windows (stride 1, data range 1), averaged over
/// windows and then channels. Images smaller than the window use one window
/// covering the whole side.
pub fn compute_ssim(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let s = a.shape();
    let (wh, ww) = (SSIM_WINDOW.min(s.height), SSIM_WINDOW.min(s.width));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let area = (wh * ww) as f64;
    let mut per_channel = 0.0;
    for c in 0..s.channels {
        let mut sum = 0.0;
        let mut windows = 0usize;
        for y0 in 0..=s.height - wh {
            for x0 in 0..=s.width - ww {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        ma += a.pixel(y, x, c) as f64;
                        mb += b.pixel(y, x, c) as f64;
                    }
                }
                ma /= area;
                mb /= area;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let da = a.pixel(y, x, c) as f64 - ma;
                        let db = b.pixel(y, x, c) as f64 - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                // unbiased window statistics, as in the reference implementation
                let norm = if area > 1.0 { area - 1.0 } else { 1.0 };
                let (va, vb, cov) = (va / norm, vb / norm, cov / norm);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1;
            }
        }
        per_channel += sum / windows as f64;
    }
    Ok(per_channel / s.channels as f64)
}

/// Wall-clock cost of building one person-specific mask.
pub fn timing_probe(make_mask: &mut dyn FnMut(&[FaceImage]) -> Result<PersonMask>, images: &[FaceImage]) -> Result<Timings> {
    let start = Instant::now();
    make_mask(images)?;
    Ok(Timings {
        t1_mask_s: start.elapsed().as_secs_f64(),
        t2_per_image_s: 0.0,
    })
}

/// Median over `repeats` timing runs.
pub fn timing_median(
    make_mask: &mut dyn FnMut(&[FaceImage]) -> Result<PersonMask>,
    images: &[FaceImage],
    repeats: usize,
) -> Result<Timings> {
    let mut t: Vec<f64> = (0..repeats.max(1))
        .map(|_| timing_probe(make_mask, images).map(|t| t.t1_mask_s))
        .collect::<Result<_>>()?;
    t.sort_by(f64::total_cmp);
    Ok(Timings {
        t1_mask_s: t[t.len() / 2],
        t2_per_image_s: 0.0,
    })
}

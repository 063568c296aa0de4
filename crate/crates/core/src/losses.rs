//! Training objectives: GAN terms, the norm hinge and the adversarial
//! feature-distance losses, including the feature-subspace variants.
//!
//! The tensor-level functions are what the trainer differentiates. The
//! image-level wrappers evaluate the same expressions on plain images and
//! return numbers.
//!
//! Class-wise losses take contiguous groups: `counts[k]` consecutive rows
//! belong to identity `k`, and every row is weighted `1 / (K * counts[k])`
//! so each identity contributes equally whatever its image count.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::advnet::{apply_perturbation, Critic, PerturbationMap};
use crate::dataio::{images_to_tensor, FaceImage};
use crate::embedder::FeatureExtractor;
use crate::error::{Error, Result};
use crate::nn::{scalar, softplus};
use crate::subspace::{project_point, FeatureHull, HullKind, SolverOptions};

/// Added inside the square root of the norm so its gradient exists at zero.
const NORM_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_norm: f64,
    pub lambda_adv: f64,
    /// Norm-hinge threshold on the 0-255 pixel scale.
    pub epsilon: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_norm >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::precondition("loss weights must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::precondition("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvObjectiveKind {
    Plain,
    Affine,
    Center,
    Convex,
}

impl AdvObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            AdvObjectiveKind::Plain => "plain",
            AdvObjectiveKind::Affine => "affine",
            AdvObjectiveKind::Center => "center",
            AdvObjectiveKind::Convex => "convex",
        }
    }

    pub fn hull_kind(self) -> Option<HullKind> {
        match self {
            AdvObjectiveKind::Plain => None,
            AdvObjectiveKind::Affine => Some(HullKind::Affine),
            AdvObjectiveKind::Center => Some(HullKind::Center),
            AdvObjectiveKind::Convex => Some(HullKind::Convex),
        }
    }
}

impl std::str::FromStr for AdvObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "affine" => Ok(Self::Affine),
            "center" => Ok(Self::Center),
            "convex" => Ok(Self::Convex),
            other => Err(Error::Config(format!(
                "unknown adversarial objective {other:?} (expected plain, affine, center or convex)"
            ))),
        }
    }
}

/// How the hull point enters the feature distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HullTarget {
    /// Cosine distance to the hull point rescaled to unit length.
    #[default]
    Renormalized,
    /// Raw Euclidean distance between the feature and its hull projection.
    Euclidean,
}

/// Norm-hinge threshold for a given image shape: an L2 norm of 3 in unit
/// pixel values at 112x112x3, rescaled by the square root of the pixel count
/// and expressed on the 0-255 scale (about 218.6 at 32x32x3).
pub fn scaled_epsilon(shape: crate::dataio::ImageShape) -> f64 {
    3.0 * 255.0 * (shape.len() as f64 / (112.0 * 112.0 * 3.0)).sqrt()
}

/// Per-row weights `1 / (K * counts[k])`.
pub fn group_weights(counts: &[usize], dtype: DType) -> Result<Tensor> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::precondition("every identity needs at least one image"));
    }
    let k = counts.len() as f64;
    let w: Vec<f64> = counts
        .iter()
        .flat_map(|&n| std::iter::repeat(1.0 / (k * n as f64)).take(n))
        .collect();
    let n = w.len();
    Ok(Tensor::from_vec(w, n, &Device::Cpu)?.to_dtype(dtype)?)
}

fn weighted_mean(values: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    match weights {
        None => Ok(values.mean_all()?),
        Some(w) => Ok((values * w)?.sum_all()?),
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: what.to_string(),
            epoch: 0,
            step: 0,
        })
    }
}

/// Both sides of the GAN value function, as differentiable scalars.
pub struct GanTerms {
    /// Non-saturating generator loss `-E[log D(fake)]`, minimised by G.
    pub gen: Tensor,
    /// `E[log D(real)] + E[log(1 - D(fake))]`, maximised by D.
    pub disc: Tensor,
}

/// GAN terms from logits; `weights` (summing to one) switches to the class-wise form.
pub fn gan_terms(
    disc: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    weights: Option<&Tensor>,
) -> Result<GanTerms> {
    if real.dim(0)? == 0 || fake.dim(0)? == 0 {
        return Err(Error::precondition("GAN loss needs non-empty batches"));
    }
    let z_real = disc.logits(real)?;
    let z_fake = disc.logits(fake)?;
    let log_d_real = softplus(&z_real.neg()?)?.neg()?;
    let log_1m_d_fake = softplus(&z_fake)?.neg()?;
    let gen = weighted_mean(&softplus(&z_fake.neg()?)?, weights)?;
    let disc = (weighted_mean(&log_d_real, weights)? + weighted_mean(&log_1m_d_fake, weights)?)?;
    check_finite(&gen, "generator GAN term")?;
    check_finite(&disc, "discriminator GAN term")?;
    Ok(GanTerms { gen, disc })
}

/// Per-row L2 norms on the 0-255 scale, `(N,)`.
pub fn norms_255(perts: &Tensor) -> Result<Tensor> {
    let n = perts.dim(0)?;
    let sq = perts.sqr()?.reshape((n, ()))?.sum(1)?;
    Ok(((sq + NORM_FLOOR)?.sqrt()? * 255.0)?)
}

/// Mean of `max(epsilon, ||p||)` over the batch (255 scale). Below the
/// threshold the row contributes a constant and no gradient.
pub fn norm_hinge(perts: &Tensor, epsilon: f64, weights: Option<&Tensor>) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::precondition("epsilon must be positive"));
    }
    let norms = norms_255(perts)?;
    let active = norms.ge(epsilon)?.to_dtype(norms.dtype())?;
    let floor = ((1.0 - &active)? * epsilon)?;
    weighted_mean(&((norms * active)? + floor)?, weights)
}

/// Cosine distance between matching rows of unit-norm feature batches.
pub fn cosine_distance_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((1.0 - (a * b)?.sum(1)?)?)
}

/// Hull targets for a batch of adversarial features. The projection is solved
/// on the current (detached) features and then held constant.
pub fn hull_targets(
    adv_features: &Tensor,
    hulls: &[&FeatureHull],
    target: HullTarget,
    opts: &SolverOptions,
) -> Result<Tensor> {
    let feats = adv_features.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if feats.len() != hulls.len() {
        return Err(Error::shape(hulls.len(), feats.len()));
    }
    let d = feats.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(feats.len() * d);
    for (q, hull) in feats.iter().zip(hulls) {
        let mut p = project_point(hull, q, opts)?.point_on_hull;
        if target == HullTarget::Renormalized {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            // a hull through the origin has no direction; a zero target gives distance 1
            let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
            p.iter_mut().for_each(|v| *v *= inv);
        }
        out.extend(p);
    }
    Ok(Tensor::from_vec(out, (feats.len(), d), &Device::Cpu)?.to_dtype(adv_features.dtype())?)
}

/// Adversarial distance for each row: against the clean features (plain) or
/// against the row's hull target.
pub fn adv_distance_rows(
    adv_features: &Tensor,
    clean_features: &Tensor,
    hulls: Option<&[&FeatureHull]>,
    target: HullTarget,
    opts: &SolverOptions,
) -> Result<Tensor> {
    match hulls {
        None => cosine_distance_rows(adv_features, &clean_features.detach()),
        Some(hulls) => {
            let t = hull_targets(adv_features, hulls, target, opts)?;
            match target {
                HullTarget::Renormalized => cosine_distance_rows(adv_features, &t),
                HullTarget::Euclidean => Ok(((adv_features - t)?.sqr()?.sum(1)? + NORM_FLOOR)?.sqrt()?),
            }
        }
    }
}

/// Generator objective pieces evaluated at the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorObjective {
    pub gan: f64,
    pub norm: f64,
    pub adv: f64,
}

impl GeneratorObjective {
    /// The minimised value `gan + lambda_norm * norm - lambda_adv * adv`; the
    /// adversarial distance enters with a minus sign because it is maximised.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.gan + w.lambda_norm * self.norm - w.lambda_adv * self.adv
    }
}

/// Differentiable counterpart of [`GeneratorObjective::total`].
pub fn assemble(gan: &Tensor, norm: &Tensor, adv: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((gan + (norm * w.lambda_norm)?)? - (adv * w.lambda_adv)?)?)
}

fn adversarial_tensor(images: &[FaceImage], perts: &[&PerturbationMap], dtype: DType) -> Result<Tensor> {
    let adv: Vec<FaceImage> = images
        .iter()
        .zip(perts)
        .map(|(x, p)| apply_perturbation(x, p))
        .collect::<Result<_>>()?;
    images_to_tensor(&adv, dtype)
}

fn check_paired(a: &[FaceImage], b: &[FaceImage]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::precondition("loss batches must be non-empty"));
    }
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// `(gen_term, disc_term)` for paired originals and adversarial images.
pub fn gan_loss_image(disc: &dyn Critic, real: &[FaceImage], fake: &[FaceImage]) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::precondition("GAN loss needs non-empty batches"));
    }
    let t = gan_terms(
        disc,
        &images_to_tensor(real, disc.dtype())?,
        &images_to_tensor(fake, disc.dtype())?,
        None,
    )?;
    Ok((scalar(&t.gen)?, scalar(&t.disc)?))
}

/// The images of one identity together with its shared mask.
#[derive(Debug, Clone)]
pub struct IdentityBatch {
    pub identity: String,
    pub images: Vec<FaceImage>,
    pub mask: PerturbationMap,
}

fn flatten_batches(batches: &[IdentityBatch]) -> Result<(Vec<FaceImage>, Vec<&PerturbationMap>, Vec<usize>)> {
    if batches.is_empty() {
        return Err(Error::precondition("class-wise loss needs at least one identity"));
    }
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut counts = Vec::new();
    for b in batches {
        if b.images.is_empty() {
            return Err(Error::precondition(format!("identity {} has no images", b.identity)));
        }
        counts.push(b.images.len());
        for x in &b.images {
            images.push(x.clone());
            masks.push(&b.mask);
        }
    }
    Ok((images, masks, counts))
}

/// Class-wise `(gen_term, disc_term)`: each identity's images with its mask applied.
pub fn gan_loss_class(disc: &dyn Critic, batches: &[IdentityBatch]) -> Result<(f64, f64)> {
    let (images, masks, counts) = flatten_batches(batches)?;
    let real = images_to_tensor(&images, disc.dtype())?;
    let fake = adversarial_tensor(&images, &masks, disc.dtype())?;
    let w = group_weights(&counts, disc.dtype())?;
    let t = gan_terms(disc, &real, &fake, Some(&w))?;
    Ok((scalar(&t.gen)?, scalar(&t.disc)?))
}

/// Mean of `max(epsilon, ||p||_2)` with norms on the 0-255 scale.
pub fn norm_loss(perts: &[PerturbationMap], epsilon: f64) -> Result<f64> {
    if perts.is_empty() {
        return Err(Error::precondition("norm loss needs at least one perturbation"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::precondition("epsilon must be positive"));
    }
    Ok(perts.iter().map(|p| p.norm_l2_255().max(epsilon)).sum::<f64>() / perts.len() as f64)
}

/// Mean cosine distance between features of adversarial and original images.
pub fn adv_loss_image(
    model: &dyn FeatureExtractor,
    originals: &[FaceImage],
    adversarials: &[FaceImage],
) -> Result<f64> {
    check_paired(originals, adversarials)?;
    let dtype = model.dtype();
    let clean = model.features(&images_to_tensor(originals, dtype)?)?;
    let adv = model.features(&images_to_tensor(adversarials, dtype)?)?;
    let d = cosine_distance_rows(&adv, &clean)?.mean_all()?;
    scalar(&d)
}

/// Class-wise adversarial distance, plain or against each identity's hull.
pub fn adv_loss_class(
    model: &dyn FeatureExtractor,
    batches: &[IdentityBatch],
    hulls: Option<&BTreeMap<String, FeatureHull>>,
    kind: AdvObjectiveKind,
    target: HullTarget,
) -> Result<f64> {
    let (images, masks, counts) = flatten_batches(batches)?;
    let dtype = model.dtype();
    let adv = model.features(&adversarial_tensor(&images, &masks, dtype)?)?;
    let w = group_weights(&counts, dtype)?;
    let rows = match kind.hull_kind() {
        None => {
            let clean = model.features(&images_to_tensor(&images, dtype)?)?;
            adv_distance_rows(&adv, &clean, None, target, &SolverOptions::default())?
        }
        Some(hk) => {
            let hulls = hulls.ok_or_else(|| Error::precondition("hull objective needs feature hulls"))?;
            let mut chosen = Vec::with_capacity(batches.len());
            for b in batches {
                let h = hulls
                    .get(&b.identity)
                    .ok_or_else(|| Error::precondition(format!("no feature hull for identity {}", b.identity)))?;
                chosen.push(h.with_kind(hk));
            }
            let per_row: Vec<&FeatureHull> = chosen
                .iter()
                .zip(&counts)
                .flat_map(|(h, &n)| std::iter::repeat(h).take(n))
                .collect();
            adv_distance_rows(&adv, &adv, Some(&per_row), target, &SolverOptions::default())?
        }
    };
    scalar(&(rows * w)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advnet::{DiscriminatorConfig, DiscriminatorModel};
    use crate::dataio::{synth_corpus, ImageShape};
    use crate::embedder::{embed_all, Arch, EmbedderConfig, EmbedderModel};
    use crate::subspace::build_hull;

    /// Logits read from a fixed table keyed by the image's first pixel.
    struct TableCritic(Vec<(f32, f64)>);

    impl Critic for TableCritic {
        fn dtype(&self) -> DType {
            DType::F64
        }

        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            let n = images.dim(0)?;
            let first = images.flatten_from(1)?.narrow(1, 0, 1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let z: Vec<f64> = first
                .iter()
                .map(|v| self.0.iter().find(|(k, _)| (k - v).abs() < 1e-6).expect("key in table").1)
                .collect();
            Ok(Tensor::from_vec(z, n, &Device::Cpu)?.to_dtype(images.dtype())?)
        }
    }

    fn shape() -> ImageShape {
        ImageShape::new(2, 2, 1)
    }

    fn img(v: f32) -> FaceImage {
        FaceImage::filled(shape(), v).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn constant_half_discriminator() {
        let d = TableCritic(vec![(0.2, 0.0), (0.4, 0.0), (0.6, 0.0)]);
        let (g, v) = gan_loss_image(&d, &[img(0.2), img(0.4)], &[img(0.6), img(0.6)]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((g + 0.5f64.ln()).abs() < 1e-9);
        let batch = IdentityBatch {
            identity: "a".into(),
            images: vec![img(0.2)],
            mask: PerturbationMap::new(shape(), vec![0.4; 4]).unwrap(),
        };
        let (_, vc) = gan_loss_class(&d, &[batch]).unwrap();
        assert!((vc - 2.0 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn near_perfect_discriminator_approaches_zero() {
        let d = TableCritic(vec![(0.2, 30.0), (0.6, -30.0)]);
        let (_, v) = gan_loss_image(&d, &[img(0.2)], &[img(0.6)]).unwrap();
        assert!(v < 0.0 && v > -1e-12);
    }

    #[test]
    fn class_loss_hand_computed() {
        // identity a: images 0.1, 0.2, mask +0.5; identity b: 0.3 only, mask +0.4
        let table = vec![(0.1, logit(0.9)), (0.2, logit(0.7)), (0.6, logit(0.2)), (0.7, logit(0.4)), (0.3, logit(0.6))];
        let d = TableCritic(table);
        let a = IdentityBatch {
            identity: "a".into(),
            images: vec![img(0.1), img(0.2)],
            mask: PerturbationMap::new(shape(), vec![0.5; 4]).unwrap(),
        };
        let b = IdentityBatch {
            identity: "b".into(),
            images: vec![img(0.3)],
            mask: PerturbationMap::new(shape(), vec![0.4; 4]).unwrap(),
        };
        let (g, v) = gan_loss_class(&d, &[a.clone(), b]).unwrap();
        let ln = f64::ln;
        // fakes: a -> 0.6 (D = 0.2) and 0.7 (D = 0.4); b -> 0.7 (D = 0.4)
        let real = 0.5 * ((ln(0.9) + ln(0.7)) / 2.0) + 0.5 * ln(0.6);
        let fake = 0.5 * ((ln(0.8) + ln(0.6)) / 2.0) + 0.5 * ln(0.6);
        assert!((v - (real + fake)).abs() < 1e-6, "{v} vs {}", real + fake);
        let gen = -(0.5 * ((ln(0.2) + ln(0.4)) / 2.0) + 0.5 * ln(0.4));
        assert!((g - gen).abs() < 1e-6);
        // one identity with one image reduces to the image-wise loss
        let single = IdentityBatch { images: vec![img(0.1)], ..a };
        let (gc, vc) = gan_loss_class(&d, &[single]).unwrap();
        let (gi, vi) = gan_loss_image(&d, &[img(0.1)], &[img(0.6)]).unwrap();
        assert!((gc - gi).abs() < 1e-12 && (vc - vi).abs() < 1e-12);
    }

    fn pert_with_norm(norm255: f64) -> PerturbationMap {
        let v = (norm255 / 255.0 / 2.0) as f32;
        PerturbationMap::new(shape(), vec![v; 4]).unwrap()
    }

    #[test]
    fn norm_hinge_values() {
        assert!((norm_loss(&[pert_with_norm(2.0)], 3.0).unwrap() - 3.0).abs() < 1e-5);
        assert!((norm_loss(&[pert_with_norm(5.0)], 3.0).unwrap() - 5.0).abs() < 1e-5);
        assert!((norm_loss(&[pert_with_norm(2.0), pert_with_norm(5.0)], 3.0).unwrap() - 4.0).abs() < 1e-5);
        assert!(norm_loss(&[], 3.0).is_err());
        let t = Tensor::from_vec(vec![5.0 / 510.0f64; 4], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!((scalar(&norm_hinge(&t, 3.0, None).unwrap()).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn norm_hinge_gradient_matches_finite_differences() {
        for (norm, eps) in [(2.0, 3.0), (5.0, 3.0)] {
            let base: Vec<f64> = [0.3, -0.5, 0.7, 0.2].iter().map(|v| v * norm / 255.0 / 0.9539392014169456).collect();
            let var = candle_core::Var::from_vec(base.clone(), (1, 1, 2, 2), &Device::Cpu).unwrap();
            let grads = norm_hinge(var.as_tensor(), eps, None).unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let f = |v: &[f64]| 255.0 * v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let len = f(&base);
            for i in 0..4 {
                let h = 1e-7;
                let (mut up, mut dn) = (base.clone(), base.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (f(&up).max(eps) - f(&dn).max(eps)) / (2.0 * h);
                if len < eps {
                    assert_eq!(g[i], 0.0);
                    assert_eq!(fd, 0.0);
                } else {
                    let expect = 255.0 * 255.0 * base[i] / len;
                    assert!((g[i] - fd).abs() / fd.abs() < 1e-2, "{} vs {fd}", g[i]);
                    assert!((g[i] - expect).abs() / expect.abs() < 1e-6);
                }
            }
        }
    }

    fn micro_setup() -> (EmbedderModel, Vec<FaceImage>) {
        let s = ImageShape::new(8, 8, 3);
        let corpus = synth_corpus(3, 4, s, 3).unwrap();
        let cfg = EmbedderConfig {
            arch: Arch::Micro,
            dim: 8,
            ..Default::default()
        };
        let model = EmbedderModel::init(&cfg, s, 3, DType::F64).unwrap();
        let images = corpus.iter().flat_map(|(_, r)| r.images.clone()).collect();
        (model, images)
    }

    #[test]
    fn adv_loss_range_and_zero() {
        let (model, images) = micro_setup();
        assert!(adv_loss_image(&model, &images, &images).unwrap().abs() < 1e-12);
        let shifted: Vec<FaceImage> = images.iter().rev().cloned().collect();
        let v = adv_loss_image(&model, &images, &shifted).unwrap();
        assert!(v > 0.0 && v <= 2.0);
        assert!(adv_loss_image(&model, &images, &images[..2]).is_err());
    }

    fn class_batch(images: &[FaceImage], identity: &str, mask: f32) -> IdentityBatch {
        IdentityBatch {
            identity: identity.into(),
            images: images.to_vec(),
            mask: PerturbationMap::new(images[0].shape(), vec![mask; images[0].shape().len()]).unwrap(),
        }
    }

    #[test]
    fn class_adv_loss_cases() {
        let (model, images) = micro_setup();
        let zero = [class_batch(&images[..4], "a", 0.0), class_batch(&images[4..8], "b", 0.0)];
        let plain = adv_loss_class(&model, &zero, None, AdvObjectiveKind::Plain, HullTarget::Renormalized).unwrap();
        assert!(plain.abs() < 1e-12);
        // a center hull of one image is that image's clean feature
        let one = [class_batch(&images[..1], "a", 0.1)];
        let feats = embed_all(&model, &images[..1]).unwrap();
        let hulls = BTreeMap::from([("a".to_string(), build_hull("a", &feats, HullKind::Center).unwrap())]);
        let c = adv_loss_class(&model, &one, Some(&hulls), AdvObjectiveKind::Center, HullTarget::Renormalized).unwrap();
        let p = adv_loss_class(&model, &one, None, AdvObjectiveKind::Plain, HullTarget::Renormalized).unwrap();
        assert!((c - p).abs() < 1e-9, "{c} vs {p}");
        assert!(adv_loss_class(&model, &one, None, AdvObjectiveKind::Convex, HullTarget::Renormalized).is_err());
    }

    #[test]
    fn euclidean_hull_losses_follow_nesting() {
        let (model, images) = micro_setup();
        let mut hulls = BTreeMap::new();
        for (id, range) in [("a", 0..4), ("b", 4..8)] {
            let feats = embed_all(&model, &images[range]).unwrap();
            hulls.insert(id.to_string(), build_hull(id, &feats, HullKind::Convex).unwrap());
        }
        let batches = [class_batch(&images[..4], "a", 0.08), class_batch(&images[4..8], "b", -0.05)];
        let eval = |k| adv_loss_class(&model, &batches, Some(&hulls), k, HullTarget::Euclidean).unwrap();
        let (aff, con, cen) = (eval(AdvObjectiveKind::Affine), eval(AdvObjectiveKind::Convex), eval(AdvObjectiveKind::Center));
        assert!(cen >= con - 1e-9 && con >= aff - 1e-9, "{cen} {con} {aff}");
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let s = ImageShape::new(8, 8, 3);
        let cfg = DiscriminatorConfig { base_channels: 4, seed: 3 };
        let d = DiscriminatorModel::init(&cfg, s, DType::F64).unwrap();
        let (_, images) = micro_setup();
        let real = images_to_tensor(&images[..4], DType::F64).unwrap();
        let fake = images_to_tensor(&images[4..8], DType::F64).unwrap();
        let value = || scalar(&gan_terms(&d, &real, &fake, None).unwrap().disc).unwrap();
        let grads = gan_terms(&d, &real, &fake, None).unwrap().disc.backward().unwrap();
        for var in d.store().vars().iter().take(5) {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let idx = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let at = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                value()
            };
            let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
            at(0.0);
            assert!((fd - g[idx]).abs() / fd.abs().max(1e-9) < 1e-2, "fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn objective_total_matches_weighted_sum() {
        let w = LossWeights { lambda_norm: 1.0, lambda_adv: 10.0, epsilon: 3.0 };
        let o = GeneratorObjective { gan: 0.7, norm: 4.0, adv: 0.25 };
        assert!((o.total(&w) - (0.7 + 4.0 - 2.5)).abs() < 1e-12);
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let a = scalar(&assemble(&t(0.7), &t(4.0), &t(0.25), &w).unwrap()).unwrap();
        assert!((a - o.total(&w)).abs() < 1e-12);
        assert!(LossWeights { lambda_norm: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn group_weights_sum_to_one() {
        let w = group_weights(&[2, 1, 3], DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(w.len(), 6);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-12 && (w[2] - 1.0 / 3.0).abs() < 1e-12);
        assert!(group_weights(&[2, 0], DType::F64).is_err());
    }
}

//! Comparison methods: FI-UAP with its feature-subspace variants, AdvFaces+
//! (stage-I perturbations averaged per person) and a random-noise mask.

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::advnet::{GeneratorModel, PerturbationMap, Stage};
use crate::dataio::{hwc_to_tensor, images_to_tensor, tensor_to_hwc, FaceImage, ImageShape};
use crate::embedder::{embed_all, FeatureExtractor};
use crate::error::{Error, Result};
use crate::losses::{adv_distance_rows, HullTarget};
use crate::nn::scalar;
use crate::subspace::{build_hull, FeatureHull, HullKind, SolverOptions};
use crate::trainer::{aggregate_mask, PersonMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiUapConfig {
    /// L-infinity bound on the 0-255 scale.
    pub epsilon_inf: f64,
    pub iterations: usize,
    /// Step size on the 0-255 scale.
    pub step_alpha: f64,
    /// `None` is plain FI-UAP; a hull kind gives the matching subspace variant.
    pub hull_kind: Option<HullKind>,
    pub hull_target: HullTarget,
    /// Start from uniform noise in a tenth of the bound. From exactly zero the
    /// plain objective has a vanishing gradient.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for FiUapConfig {
    fn default() -> Self {
        Self {
            epsilon_inf: 8.0,
            iterations: 16,
            step_alpha: 1.0,
            hull_kind: None,
            hull_target: HullTarget::Renormalized,
            random_start: true,
            seed: 0,
        }
    }
}

impl FiUapConfig {
    pub fn method_name(&self) -> &'static str {
        match self.hull_kind {
            None => "fi-uap",
            Some(HullKind::Affine) => "opom-affine",
            Some(HullKind::Center) => "opom-center",
            Some(HullKind::Convex) => "opom-convex",
        }
    }
}

/// Signed unit steps; zero stays zero.
fn sign(t: &Tensor) -> Result<Tensor> {
    let pos = t.gt(0.0)?.to_dtype(t.dtype())?;
    let neg = t.lt(0.0)?.to_dtype(t.dtype())?;
    Ok((pos - neg)?)
}

/// Iterative sign-gradient ascent on a single mask shared by all `images`.
pub fn fi_uap(
    identity: &str,
    images: &[FaceImage],
    embedder: &dyn FeatureExtractor,
    config: &FiUapConfig,
) -> Result<PersonMask> {
    if images.is_empty() {
        return Err(Error::precondition(format!("no images to build a mask for {identity}")));
    }
    if !(config.epsilon_inf > 0.0) {
        return Err(Error::precondition("epsilon_inf must be positive"));
    }
    let shape = images[0].shape();
    let dtype = embedder.dtype();
    let eps = config.epsilon_inf / 255.0;
    let alpha = config.step_alpha / 255.0;
    let hull: Option<FeatureHull> = match config.hull_kind {
        None => None,
        Some(kind) => {
            if images.len() < 2 {
                return Err(Error::precondition("hull variants need at least two images"));
            }
            Some(build_hull(identity, &embed_all(embedder, images)?, kind)?)
        }
    };
    let x = images_to_tensor(images, dtype)?;
    let n = images.len();
    let clean = embedder.features(&x)?.detach();
    let mut delta = if config.random_start && config.iterations > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Uniform::new_inclusive(-eps / 10.0, eps / 10.0).expect("valid range");
        let v: Vec<f32> = (0..shape.len()).map(|_| dist.sample(&mut rng) as f32).collect();
        hwc_to_tensor(&[v.as_slice()], shape, dtype)?
    } else {
        Tensor::zeros((1, shape.channels, shape.height, shape.width), dtype, &Device::Cpu)?
    };
    let hulls: Vec<&FeatureHull> = hull.iter().cycle().take(if hull.is_some() { n } else { 0 }).collect();
    for step in 0..config.iterations {
        let d = Var::from_tensor(&delta)?;
        let adv = x.broadcast_add(d.as_tensor())?;
        let feats = embedder.features(&adv)?;
        let rows = if hull.is_some() {
            adv_distance_rows(&feats, &feats, Some(&hulls), config.hull_target, &SolverOptions::default())?
        } else {
            adv_distance_rows(&feats, &clean, None, config.hull_target, &SolverOptions::default())?
        };
        let loss = rows.mean_all()?;
        let grads = loss.backward()?;
        let g = grads
            .get(d.as_tensor())
            .ok_or_else(|| Error::precondition("mask received no gradient"))?;
        if !scalar(&g.abs()?.sum_all()?)?.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} gradient for {identity}", config.method_name()),
                epoch: 0,
                step,
            });
        }
        delta = (d.as_tensor() + (sign(g)? * alpha)?)?.clamp(-eps, eps)?.detach();
    }
    let data = tensor_to_hwc(&delta)?.remove(0);
    Ok(PersonMask {
        identity: identity.to_string(),
        mask: PerturbationMap::new(shape, data)?,
        n_images: n,
        method: config.method_name().into(),
        generator_hash: None,
    })
}

/// Stage-I perturbations averaged over an identity's images.
pub fn advfaces_plus(gen_stage1: &GeneratorModel, identity: &str, images: &[FaceImage]) -> Result<PersonMask> {
    if gen_stage1.stage() != Stage::I {
        return Err(Error::precondition("AdvFaces+ uses an image-specific (stage I) generator"));
    }
    let mut m = aggregate_mask(gen_stage1, identity, images)?;
    m.method = "advfaces+".into();
    Ok(m)
}

/// Gaussian noise mask; only its direction matters once normalised.
pub fn random_noise_mask(identity: &str, shape: ImageShape, seed: u64) -> Result<PersonMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, 1.0 / 255.0).expect("valid sigma");
    let data = (0..shape.len()).map(|_| dist.sample(&mut rng)).collect();
    Ok(PersonMask {
        identity: identity.to_string(),
        mask: PerturbationMap::new(shape, data)?,
        n_images: 0,
        method: "random-noise".into(),
        generator_hash: None,
    })
}

//! Perturbation generator and image discriminator.
//!
//! The generator is an encoder-decoder: a stem convolution, three stride-2
//! downsampling blocks, two residual blocks at the bottleneck and three
//! transposed-convolution upsampling blocks with additive skips, followed by a
//! `tanh` output scaled to `[-output_scale, output_scale]`. The discriminator
//! is a four-layer strided patch critic whose patch logits are averaged into
//! one probability per image.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::{hwc_to_tensor, tensor_to_hwc, FaceImage, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Init, ParamStore, Upsample2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Channel width of the stem; deeper blocks scale from it.
    pub base_channels: usize,
    /// Bound on each raw output value, in `[0, 1]` pixel units.
    pub output_scale: f64,
    /// Uniform init range of the output convolution. Small values start the
    /// generator near the norm-hinge threshold rather than far above it.
    pub output_init: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            output_scale: 0.1,
            output_init: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            seed: 1,
        }
    }
}

/// An additive perturbation in `[0, 1]` pixel units, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMap {
    shape: ImageShape,
    data: Vec<f32>,
}

impl PerturbationMap {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition("perturbation has non-finite entries"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// L2 norm on the 0-255 pixel scale.
    pub fn norm_l2_255(&self) -> f64 {
        255.0 * self.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| (v as f64 * factor) as f32).collect(),
        }
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        hwc_to_tensor(&[self.data.as_slice()], self.shape, dtype)
    }

    /// Element-wise mean of equally shaped perturbations.
    pub fn mean(maps: &[PerturbationMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::precondition("cannot average zero perturbations"))?;
        let mut acc = vec![0f64; first.data.len()];
        for m in maps {
            if m.shape != first.shape {
                return Err(Error::shape(first.shape, m.shape));
            }
            for (a, v) in acc.iter_mut().zip(&m.data) {
                *a += *v as f64;
            }
        }
        let n = maps.len() as f64;
        Self::new(first.shape, acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

/// Pixel-wise `image + perturbation`, clipped to `[0, 1]`.
pub fn apply_perturbation(image: &FaceImage, pert: &PerturbationMap) -> Result<FaceImage> {
    if image.shape() != pert.shape() {
        return Err(Error::shape(image.shape(), pert.shape()));
    }
    let data = image
        .data()
        .iter()
        .zip(pert.data())
        .map(|(x, d)| x + d)
        .collect();
    FaceImage::from_clamped(image.shape(), data)
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&self.a.forward(x)?.silu()?)?;
        Ok((x + h)?)
    }
}

struct GeneratorNet {
    stem: Conv2d,
    down: [Conv2d; 3],
    res: [ResBlock; 2],
    up: [Upsample2d; 3],
    out: Conv2d,
}

impl GeneratorNet {
    fn build(store: &mut ParamStore, shape: ImageShape, config: &GeneratorConfig) -> Result<Self> {
        let base = config.base_channels;
        if shape.height % 8 != 0 || shape.width % 8 != 0 {
            return Err(Error::precondition(format!(
                "generator needs image sides divisible by 8, got {shape}"
            )));
        }
        let c = shape.channels;
        let w = [base, base * 3 / 2, base * 2, base * 3];
        Ok(Self {
            stem: Conv2d::new(store, "g.stem", c, w[0], 3, 1, 1)?,
            down: [
                Conv2d::new(store, "g.down1", w[0], w[1], 3, 2, 1)?,
                Conv2d::new(store, "g.down2", w[1], w[2], 3, 2, 1)?,
                Conv2d::new(store, "g.down3", w[2], w[3], 3, 2, 1)?,
            ],
            res: [
                ResBlock {
                    a: Conv2d::new(store, "g.res1.a", w[3], w[3], 3, 1, 1)?,
                    b: Conv2d::new(store, "g.res1.b", w[3], w[3], 3, 1, 1)?,
                },
                ResBlock {
                    a: Conv2d::new(store, "g.res2.a", w[3], w[3], 3, 1, 1)?,
                    b: Conv2d::new(store, "g.res2.b", w[3], w[3], 3, 1, 1)?,
                },
            ],
            up: [
                Upsample2d::new(store, "g.up1", w[3], w[2])?,
                Upsample2d::new(store, "g.up2", w[2], w[1])?,
                Upsample2d::new(store, "g.up3", w[1], w[0])?,
            ],
            out: Conv2d::with_init(store, "g.out", [w[0], c, 3, 1, 1], Init::Uniform(config.output_init))?,
        })
    }

    fn forward(&self, x: &Tensor, output_scale: f64) -> Result<Tensor> {
        let x = x.affine(2.0, -1.0)?;
        let s0 = self.stem.forward(&x)?.silu()?;
        let s1 = self.down[0].forward(&s0)?.silu()?;
        let s2 = self.down[1].forward(&s1)?.silu()?;
        let mut h = self.down[2].forward(&s2)?.silu()?;
        for block in &self.res {
            h = block.forward(&h)?;
        }
        let h = (self.up[0].forward(&h)?.silu()? + s2)?;
        let h = (self.up[1].forward(&h)?.silu()? + s1)?;
        let h = (self.up[2].forward(&h)?.silu()? + s0)?;
        Ok((self.out.forward(&h)?.tanh()? * output_scale)?)
    }
}

pub struct GeneratorModel {
    config: GeneratorConfig,
    shape: ImageShape,
    stage: Stage,
    /// Norm-hinge threshold the model was trained with (0-255 scale).
    pub epsilon: f64,
    store: ParamStore,
    net: GeneratorNet,
}

impl GeneratorModel {
    pub fn init(config: &GeneratorConfig, shape: ImageShape, dtype: DType) -> Result<Self> {
        Self::from_store(config.clone(), shape, Stage::I, 3.0, ParamStore::seeded(config.seed, dtype))
    }

    pub fn from_store(
        config: GeneratorConfig,
        shape: ImageShape,
        stage: Stage,
        epsilon: f64,
        mut store: ParamStore,
    ) -> Result<Self> {
        let net = GeneratorNet::build(&mut store, shape, &config)?;
        Ok(Self {
            config,
            shape,
            stage,
            epsilon,
            store,
            net,
        })
    }

    /// Independent copy carrying a new stage tag (used to warm-start stage II).
    pub fn fork(&self, stage: Stage) -> Result<Self> {
        Self::from_store(
            self.config.clone(),
            self.shape,
            stage,
            self.epsilon,
            self.store.deep_copy(self.store.dtype())?,
        )
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(
            self.config.clone(),
            self.shape,
            self.stage,
            self.epsilon,
            self.store.frozen_view(),
        )
    }

    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_store(self.config.clone(), self.shape, self.stage, self.epsilon, self.store.deep_copy(dtype)?)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn content_hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    /// Batched, differentiable forward pass on an `(N, C, H, W)` tensor.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if (h, w, c) != (self.shape.height, self.shape.width, self.shape.channels) {
            return Err(Error::shape(self.shape, ImageShape::new(h, w, c)));
        }
        self.net.forward(images, self.config.output_scale)
    }
}

/// The perturbation the generator assigns to one image.
pub fn generate(gen: &GeneratorModel, image: &FaceImage) -> Result<PerturbationMap> {
    if image.shape() != gen.shape {
        return Err(Error::shape(gen.shape, image.shape()));
    }
    let out = gen.forward(&image.to_tensor(gen.store.dtype())?)?;
    PerturbationMap::new(gen.shape, tensor_to_hwc(&out)?.remove(0))
}

/// Perturbations for many images, batched.
pub fn generate_all(gen: &GeneratorModel, images: &[FaceImage]) -> Result<Vec<PerturbationMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let t = crate::dataio::images_to_tensor(chunk, gen.store.dtype())?;
        for data in tensor_to_hwc(&gen.forward(&t)?)? {
            out.push(PerturbationMap::new(gen.shape, data)?);
        }
    }
    Ok(out)
}

/// Anything producing one real/fake logit per image of an `(N, C, H, W)` batch.
pub trait Critic {
    fn dtype(&self) -> DType;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

struct DiscriminatorNet {
    convs: [Conv2d; 3],
    head: Conv2d,
}

pub struct DiscriminatorModel {
    config: DiscriminatorConfig,
    shape: ImageShape,
    stage: Stage,
    store: ParamStore,
    net: DiscriminatorNet,
}

impl DiscriminatorModel {
    pub fn init(config: &DiscriminatorConfig, shape: ImageShape, dtype: DType) -> Result<Self> {
        Self::from_store(config.clone(), shape, Stage::I, ParamStore::seeded(config.seed, dtype))
    }

    pub fn from_store(
        config: DiscriminatorConfig,
        shape: ImageShape,
        stage: Stage,
        mut store: ParamStore,
    ) -> Result<Self> {
        if shape.height % 8 != 0 || shape.width % 8 != 0 {
            return Err(Error::precondition(format!(
                "discriminator needs image sides divisible by 8, got {shape}"
            )));
        }
        let b = config.base_channels;
        let net = DiscriminatorNet {
            convs: [
                Conv2d::new(&mut store, "d.conv1", shape.channels, b, 3, 2, 1)?,
                Conv2d::new(&mut store, "d.conv2", b, 2 * b, 3, 2, 1)?,
                Conv2d::new(&mut store, "d.conv3", 2 * b, 4 * b, 3, 2, 1)?,
            ],
            head: Conv2d::new(&mut store, "d.head", 4 * b, 1, 3, 1, 1)?,
        };
        Ok(Self {
            config,
            shape,
            stage,
            store,
            net,
        })
    }

    pub fn fork(&self, stage: Stage) -> Result<Self> {
        Self::from_store(self.config.clone(), self.shape, stage, self.store.deep_copy(self.store.dtype())?)
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.shape, self.stage, self.store.frozen_view())
    }

    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_store(self.config.clone(), self.shape, self.stage, self.store.deep_copy(dtype)?)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }
}

impl Critic for DiscriminatorModel {
    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        if (h, w, c) != (self.shape.height, self.shape.width, self.shape.channels) {
            return Err(Error::shape(self.shape, ImageShape::new(h, w, c)));
        }
        let mut x = images.affine(2.0, -1.0)?;
        for conv in &self.net.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        Ok(self.net.head.forward(&x)?.reshape((n, ()))?.mean(1)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability that `image` is an original (not perturbed) image.
pub fn discriminate(disc: &dyn Critic, image: &FaceImage) -> Result<f64> {
    let z = crate::nn::scalar(&disc.logits(&image.to_tensor(disc.dtype())?)?)?;
    Ok(sigmoid(z))
}

/// Batched probabilities.
pub fn discriminate_all(disc: &dyn Critic, images: &[FaceImage]) -> Result<Vec<f64>> {
    let t = crate::dataio::images_to_tensor(images, disc.dtype())?;
    let z = disc.logits(&t)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(z.into_iter().map(sigmoid).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_corpus;

    fn shape() -> ImageShape {
        ImageShape::new(32, 32, 3)
    }

    fn sample() -> Vec<FaceImage> {
        synth_corpus(2, 3, shape(), 5).unwrap().iter().flat_map(|(_, r)| r.images.clone()).collect()
    }

    #[test]
    fn generator_contract() {
        let g = GeneratorModel::init(&GeneratorConfig::default(), shape(), DType::F32).unwrap();
        assert!(g.store().param_count() <= 200_000, "{}", g.store().param_count());
        let img = &sample()[0];
        let p = generate(&g, img).unwrap();
        assert_eq!(p.shape(), img.shape());
        assert_eq!(p, generate(&g, img).unwrap());
        assert!(p.norm_l2_255().is_finite() && p.norm_l2_255() > 0.0);
        assert!(p.data().iter().all(|v| v.abs() <= 0.1 + 1e-6));
        // starts in the neighbourhood of the hinge threshold, not far above it
        assert!(p.norm_l2_255() < 100.0, "{}", p.norm_l2_255());
        let batch = generate_all(&g, &sample()).unwrap();
        assert!(batch[0].data().iter().zip(p.data()).all(|(a, b)| (a - b).abs() < 1e-5));
        let wrong = FaceImage::filled(ImageShape::new(16, 16, 3), 0.5).unwrap();
        assert!(generate(&g, &wrong).is_err());
    }

    #[test]
    fn apply_clips_and_is_idempotent() {
        let s = ImageShape::new(1, 2, 1);
        let img = FaceImage::new(s, vec![0.5, 0.95]).unwrap();
        assert_eq!(apply_perturbation(&img, &PerturbationMap::zeros(s)).unwrap(), img);
        let p = PerturbationMap::new(s, vec![-0.7, 0.1]).unwrap();
        let out = apply_perturbation(&img, &p).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
        assert_eq!(apply_perturbation(&out, &PerturbationMap::zeros(s)).unwrap(), out);
    }

    #[test]
    fn mean_of_perturbations() {
        let s = ImageShape::new(1, 2, 1);
        let a = PerturbationMap::new(s, vec![1.0, -1.0]).unwrap();
        let b = PerturbationMap::new(s, vec![0.0, 3.0]).unwrap();
        assert_eq!(PerturbationMap::mean(&[a, b]).unwrap().data(), &[0.5, 1.0]);
        assert!(PerturbationMap::mean(&[]).is_err());
        assert!((PerturbationMap::new(s, vec![3.0 / 255.0, 4.0 / 255.0]).unwrap().norm_l2_255() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let d = DiscriminatorModel::init(&DiscriminatorConfig::default(), shape(), DType::F32).unwrap();
        let imgs = sample();
        let batch = discriminate_all(&d, &imgs).unwrap();
        for (img, pb) in imgs.iter().zip(&batch) {
            let p = discriminate(&d, img).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert!((p - pb).abs() < 1e-6);
        }
    }

    #[test]
    fn generator_parameters_receive_gradient() {
        // finite differences on a handful of parameters, in f64
        let cfg = GeneratorConfig {
            base_channels: 4,
            ..Default::default()
        };
        let g = GeneratorModel::init(&cfg, ImageShape::new(8, 8, 3), DType::F64).unwrap();
        let x = synth_corpus(1, 1, ImageShape::new(8, 8, 3), 2).unwrap().iter().next().unwrap().1.images[0]
            .to_tensor(DType::F64)
            .unwrap();
        let w = Tensor::randn(0f64, 1.0, (1, 3, 8, 8), &candle_core::Device::Cpu).unwrap();
        let objective = || -> f64 { crate::nn::scalar(&(g.forward(&x).unwrap() * &w).unwrap().sum_all().unwrap()).unwrap() };
        let loss = (g.forward(&x).unwrap() * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let vars = g.store().vars();
        let mut checked = 0;
        for (vi, var) in vars.iter().enumerate().filter(|(_, v)| v.dims().len() == 4).take(5) {
            let grad = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            // off-centre taps of the 1x1 bottleneck only see padding, so
            // probe the most sensitive coordinate of each tensor
            let idx = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &candle_core::Device::Cpu).unwrap()).unwrap();
                objective()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            eval(0.0);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-12);
            assert!(rel < 1e-2, "param {vi}: fd {fd} analytic {}", grad[idx]);
            assert!(grad[idx] != 0.0);
            checked += 1;
        }
        assert_eq!(checked, 5);
    }
}

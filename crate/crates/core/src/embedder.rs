//! Surrogate face-recognition models mapping images to unit-norm embeddings.
//!
//! Three small convolutional backbones (differing in depth, kernel size and
//! pooling) can be combined with a plain softmax classifier or the additive
//! cosine (CosFace) and additive angular (ArcFace) margin heads. Only the
//! backbone is used after training; the head exists to shape the embedding.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{images_to_tensor, FaceImage, IdentityCorpus, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{adam, l2_normalize, scalar, Conv2d, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SmallCnnA,
    SmallCnnB,
    SmallCnnC,
    /// One convolution and a projection; used by gradient checks.
    Micro,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn_a" | "a" => Ok(Arch::SmallCnnA),
            "small_cnn_b" | "b" => Ok(Arch::SmallCnnB),
            "small_cnn_c" | "c" => Ok(Arch::SmallCnnC),
            "micro" => Ok(Arch::Micro),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax,
    CosfaceMargin,
    ArcfaceMargin,
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Head::Softmax),
            "cosface_margin" | "cosface" => Ok(Head::CosfaceMargin),
            "arcface_margin" | "arcface" => Ok(Head::ArcfaceMargin),
            _ => Err(Error::Config(format!("unknown head `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub arch: Arch,
    pub head: Head,
    /// Embedding dimension.
    pub dim: usize,
    /// Additive margin (cosine for CosFace, angular in radians for ArcFace).
    pub margin: f64,
    /// Logit scale for the margin heads.
    pub scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SmallCnnA,
            head: Head::Softmax,
            dim: 64,
            margin: 0.2,
            scale: 16.0,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    fn validate(&self) -> Result<()> {
        if self.margin < 0.0 || self.scale <= 0.0 || self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "embedder needs margin >= 0, scale > 0, dim > 0, batch_size > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalises an arbitrary non-zero vector.
    pub fn from_raw(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::precondition("cannot normalise a zero or non-finite vector"));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    /// Wraps a vector that is already unit-norm (within 1e-5).
    pub fn unit(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::precondition(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn negated(&self) -> Embedding {
        Embedding(self.0.iter().map(|x| -x).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    CosineDistance,
}

/// `1 - <a, b>` clamped to the metric range `[0, 2]`.
pub fn distance(a: &Embedding, b: &Embedding, metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::CosineDistance => (1.0 - a.dot(b)).clamp(0.0, 2.0),
    }
}

/// Anything that maps an `(N, C, H, W)` batch to `(N, d)` unit-norm features.
pub trait FeatureExtractor {
    fn input_shape(&self) -> ImageShape;
    fn dtype(&self) -> DType;
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

enum Backbone {
    A {
        convs: [Conv2d; 3],
        proj: Linear,
    },
    B {
        convs: [Conv2d; 4],
        proj: Linear,
    },
    C {
        convs: [Conv2d; 3],
        fc: Linear,
        proj: Linear,
    },
    Micro {
        conv: Conv2d,
        proj: Linear,
    },
}

/// Per-image zero mean and unit variance, removing exposure differences.
fn standardize(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let flat = x.reshape((n, ()))?;
    let centred = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
    let std = (centred.sqr()?.mean_keepdim(1)? + 1e-4)?.sqrt()?;
    Ok(centred.broadcast_div(&std)?.reshape(x.shape())?)
}

impl Backbone {
    fn build(store: &mut ParamStore, arch: Arch, shape: ImageShape, dim: usize) -> Result<Self> {
        let (h, w, c) = (shape.height, shape.width, shape.channels);
        let divisor = if arch == Arch::Micro { 2 } else { 8 };
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::precondition(format!(
                "{arch:?} needs image sides divisible by {divisor}, got {shape}"
            )));
        }
        Ok(match arch {
            Arch::SmallCnnA => Backbone::A {
                convs: [
                    Conv2d::new(store, "a.conv1", c, 16, 3, 1, 1)?,
                    Conv2d::new(store, "a.conv2", 16, 32, 3, 1, 1)?,
                    Conv2d::new(store, "a.conv3", 32, 32, 3, 1, 1)?,
                ],
                proj: Linear::new(store, "a.proj", 32 * (h / 8) * (w / 8), dim)?,
            },
            Arch::SmallCnnB => Backbone::B {
                convs: [
                    Conv2d::new(store, "b.conv1", c, 24, 3, 2, 1)?,
                    Conv2d::new(store, "b.conv2", 24, 48, 3, 2, 1)?,
                    Conv2d::new(store, "b.conv3", 48, 48, 3, 1, 1)?,
                    Conv2d::new(store, "b.conv4", 48, 64, 3, 2, 1)?,
                ],
                proj: Linear::new(store, "b.proj", 64 * (h / 16) * (w / 16), dim)?,
            },
            Arch::SmallCnnC => Backbone::C {
                convs: [
                    Conv2d::new(store, "c.conv1", c, 12, 5, 1, 2)?,
                    Conv2d::new(store, "c.conv2", 12, 24, 5, 1, 2)?,
                    Conv2d::new(store, "c.conv3", 24, 48, 3, 2, 1)?,
                ],
                fc: Linear::new(store, "c.fc", 48 * (h / 8) * (w / 8), 128)?,
                proj: Linear::new(store, "c.proj", 128, dim)?,
            },
            Arch::Micro => Backbone::Micro {
                conv: Conv2d::new(store, "m.conv", c, 4, 3, 1, 1)?,
                proj: Linear::new(store, "m.proj", 4 * (h / 2) * (w / 2), dim)?,
            },
        })
    }

    /// Unnormalised features.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = standardize(x)?;
        Ok(match self {
            Backbone::A { convs, proj } => {
                let mut h = x;
                for conv in convs {
                    h = conv.forward(&h)?.silu()?.avg_pool2d(2)?;
                }
                proj.forward(&h.flatten_from(1)?)?
            }
            Backbone::B { convs, proj } => {
                let mut h = x;
                for conv in convs {
                    h = conv.forward(&h)?.silu()?;
                }
                proj.forward(&h.avg_pool2d(2)?.flatten_from(1)?)?
            }
            Backbone::C { convs, fc, proj } => {
                let h = convs[0].forward(&x)?.silu()?.avg_pool2d(2)?;
                let h = convs[1].forward(&h)?.silu()?.avg_pool2d(2)?;
                let h = convs[2].forward(&h)?.silu()?;
                proj.forward(&fc.forward(&h.flatten_from(1)?)?.silu()?)?
            }
            Backbone::Micro { conv, proj } => {
                let h = conv.forward(&x)?.silu()?.avg_pool2d(2)?;
                proj.forward(&h.flatten_from(1)?)?
            }
        })
    }
}

/// Classification head used only while training the embedder.
struct ClassHead {
    kind: Head,
    linear: Linear,
    margin: f64,
    scale: f64,
}

impl ClassHead {
    fn build(store: &mut ParamStore, config: &EmbedderConfig, classes: usize) -> Result<Self> {
        let linear = match config.head {
            Head::Softmax => Linear::new(store, "head", config.dim, classes)?,
            _ => Linear::no_bias(
                store,
                "head",
                config.dim,
                classes,
                Init::Kaiming { fan_in: config.dim },
            )?,
        };
        Ok(Self {
            kind: config.head,
            linear,
            margin: config.margin,
            scale: config.scale,
        })
    }

    fn cosines(&self, raw: &Tensor) -> Result<Tensor> {
        let e = l2_normalize(raw)?;
        let w = l2_normalize(self.linear.weight())?;
        Ok(e.matmul(&w.t()?)?)
    }

    /// Logits without margins, used for prediction.
    fn scores(&self, raw: &Tensor) -> Result<Tensor> {
        match self.kind {
            Head::Softmax => self.linear.forward(raw),
            _ => self.cosines(raw),
        }
    }

    fn training_logits(&self, raw: &Tensor, labels: &[u32]) -> Result<Tensor> {
        if self.kind == Head::Softmax {
            return self.linear.forward(raw);
        }
        let cos = self.cosines(raw)?;
        let (n, classes) = cos.dims2()?;
        let mut onehot = vec![0f32; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * classes + l as usize] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (n, classes), &Device::Cpu)?.to_dtype(cos.dtype())?;
        let target = match self.kind {
            Head::CosfaceMargin => (&cos - self.margin)?,
            _ => {
                // cos(t + m) with the usual fallback once t + m passes pi.
                let (cm, sm) = (self.margin.cos(), self.margin.sin());
                let sin = (1.0 - cos.sqr()?)?.clamp(1e-7, 1.0)?.sqrt()?;
                let shifted = ((&cos * cm)? - (sin * sm)?)?;
                let threshold = (std::f64::consts::PI - self.margin).cos();
                let fallback = (&cos - (std::f64::consts::PI - self.margin).sin() * self.margin)?;
                let past = cos.gt(threshold)?;
                past.where_cond(&shifted, &fallback)?
            }
        };
        let mixed = ((&onehot * &target)? + ((1.0 - &onehot)? * &cos)?)?;
        Ok((mixed * self.scale)?)
    }
}

pub struct EmbedderModel {
    config: EmbedderConfig,
    shape: ImageShape,
    classes: usize,
    store: ParamStore,
    backbone: Backbone,
    head: ClassHead,
    training_accuracy: Option<f64>,
}

impl EmbedderModel {
    /// Freshly initialised (untrained) model.
    pub fn init(config: &EmbedderConfig, shape: ImageShape, classes: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::seeded(config.seed, dtype);
        Self::from_store(config.clone(), shape, classes, store, None)
    }

    pub fn from_store(
        config: EmbedderConfig,
        shape: ImageShape,
        classes: usize,
        mut store: ParamStore,
        training_accuracy: Option<f64>,
    ) -> Result<Self> {
        let backbone = Backbone::build(&mut store, config.arch, shape, config.dim)?;
        let head = ClassHead::build(&mut store, &config, classes)?;
        Ok(Self {
            config,
            shape,
            classes,
            store,
            backbone,
            head,
            training_accuracy,
        })
    }

    /// Inference view sharing parameters but never tracking gradients.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(
            self.config.clone(),
            self.shape,
            self.classes,
            self.store.frozen_view(),
            self.training_accuracy,
        )
    }

    /// Independent copy in another precision (e.g. f64 for gradient checks).
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_store(
            self.config.clone(),
            self.shape,
            self.classes,
            self.store.deep_copy(dtype)?,
            self.training_accuracy,
        )
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn training_accuracy(&self) -> Option<f64> {
        self.training_accuracy
    }

    pub fn content_hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (h, w, c) != (self.shape.height, self.shape.width, self.shape.channels) {
            return Err(Error::shape(self.shape, ImageShape::new(h, w, c)));
        }
        Ok(())
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<u32>> {
        let scores = self.head.scores(&self.backbone.forward(x)?)?;
        Ok(scores.argmax(D::Minus1)?.to_vec1::<u32>()?)
    }
}

impl FeatureExtractor for EmbedderModel {
    fn input_shape(&self) -> ImageShape {
        self.shape
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        l2_normalize(&self.backbone.forward(images)?)
    }
}

/// Embeds one image.
pub fn embed(model: &dyn FeatureExtractor, image: &FaceImage) -> Result<Embedding> {
    if image.shape() != model.input_shape() {
        return Err(Error::shape(model.input_shape(), image.shape()));
    }
    let f = model.features(&image.to_tensor(model.dtype())?)?;
    let v = f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Embedding::from_raw(v)
}

/// Embeds many images in chunks.
pub fn embed_all(model: &dyn FeatureExtractor, images: &[FaceImage]) -> Result<Vec<Embedding>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(128) {
        if let Some(bad) = chunk.iter().find(|i| i.shape() != model.input_shape()) {
            return Err(Error::shape(model.input_shape(), bad.shape()));
        }
        let f = model.features(&images_to_tensor(chunk, model.dtype())?)?;
        for row in f.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            out.push(Embedding::from_raw(row)?);
        }
    }
    Ok(out)
}

/// Trains a surrogate recogniser on a labelled corpus.
///
/// Training is single-threaded deterministic: identical corpus and config give
/// an identical parameter hash.
pub fn train_embedder(corpus: &IdentityCorpus, config: &EmbedderConfig) -> Result<EmbedderModel> {
    if corpus.len() < 2 {
        return Err(Error::precondition(format!(
            "embedder training needs at least 2 identities, got {}",
            corpus.len()
        )));
    }
    let model = EmbedderModel::init(config, corpus.shape(), corpus.len(), DType::F32)?;
    let labelled = corpus.labelled_images();
    let images: Vec<FaceImage> = labelled.iter().map(|(_, img)| (*img).clone()).collect();
    let labels: Vec<u32> = labelled.iter().map(|(l, _)| *l as u32).collect();
    let all = images_to_tensor(&images, DType::F32)?;

    let mut opt = adam(model.store.vars(), config.learning_rate, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<u32> = (0..images.len() as u32).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let idx = Tensor::new(batch, &Device::Cpu)?;
            let x = all.index_select(&idx, 0)?;
            let y: Vec<u32> = batch.iter().map(|&i| labels[i as usize]).collect();
            let raw = model.backbone.forward(&x)?;
            let logits = model.head.training_logits(&raw, &y)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &Tensor::new(y.as_slice(), &Device::Cpu)?)?;
            if !scalar(&loss)?.is_finite() {
                return Err(Error::NonFinite {
                    context: "embedder training loss".into(),
                    epoch,
                    step,
                });
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
    }

    let mut correct = 0;
    for (start, chunk) in (0..images.len()).step_by(256).map(|s| (s, &images[s..(s + 256).min(images.len())])) {
        let pred = model.predict(&images_to_tensor(chunk, DType::F32)?)?;
        correct += pred
            .iter()
            .zip(&labels[start..start + chunk.len()])
            .filter(|(p, l)| p == l)
            .count();
    }
    let accuracy = correct as f64 / images.len() as f64;
    let EmbedderModel {
        config, shape, classes, store, ..
    } = model;
    EmbedderModel::from_store(config, shape, classes, store, Some(accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::from_raw(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let e = unit(&[0.3, -0.4, 0.5]);
        assert!(distance(&e, &e, DistanceMetric::CosineDistance).abs() < 1e-12);
        assert!((distance(&e, &e.negated(), DistanceMetric::CosineDistance) - 2.0).abs() < 1e-12);
        let x = unit(&[1.0, 0.0, 0.0]);
        let y = unit(&[0.0, 1.0, 0.0]);
        assert!((distance(&x, &y, DistanceMetric::CosineDistance) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_constructor_checks_norm() {
        assert!(Embedding::unit(vec![1.0, 1.0]).is_err());
        assert!(Embedding::unit(vec![0.6, 0.8]).is_ok());
        assert!(Embedding::from_raw(vec![0.0, 0.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn distance_ranking_ignores_feature_scale(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            c in proptest::collection::vec(-1.0f64..1.0, 6),
            s in 0.01f64..100.0,
        ) {
            let ok = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>() > 1e-6;
            proptest::prop_assume!(ok(&a) && ok(&b) && ok(&c));
            let m = DistanceMetric::CosineDistance;
            let scaled = |v: &Vec<f64>| Embedding::from_raw(v.iter().map(|x| x * s).collect()).unwrap();
            let (ea, eb, ec) = (unit(&a), unit(&b), unit(&c));
            let (sa, sb, sc) = (scaled(&a), scaled(&b), scaled(&c));
            let d1 = distance(&ea, &eb, m);
            let d2 = distance(&ea, &ec, m);
            proptest::prop_assert!((distance(&sa, &sb, m) - d1).abs() < 1e-9);
            proptest::prop_assert!((distance(&sa, &sc, m) - d2).abs() < 1e-9);
            proptest::prop_assert!((0.0..=2.0).contains(&d1));
            proptest::prop_assert!((d1 - distance(&eb, &ea, m)).abs() < 1e-12);
        }
    }

    #[test]
    fn all_archs_produce_unit_embeddings() {
        let shape = ImageShape::new(32, 32, 3);
        let img = FaceImage::filled(shape, 0.3).unwrap();
        for arch in [Arch::SmallCnnA, Arch::SmallCnnB, Arch::SmallCnnC] {
            let cfg = EmbedderConfig { arch, ..Default::default() };
            let m = EmbedderModel::init(&cfg, shape, 3, DType::F32).unwrap();
            let e = embed(&m, &img).unwrap();
            assert_eq!(e.dim(), 64);
            assert!((e.norm() - 1.0).abs() < 1e-5);
            assert!(distance(&e, &embed(&m, &img).unwrap(), DistanceMetric::CosineDistance) < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = EmbedderConfig::default();
        let m = EmbedderModel::init(&cfg, ImageShape::new(32, 32, 3), 2, DType::F32).unwrap();
        let img = FaceImage::filled(ImageShape::new(16, 16, 3), 0.3).unwrap();
        assert!(matches!(embed(&m, &img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_identity_rejected() {
        let c = crate::dataio::synth_corpus(1, 4, ImageShape::new(16, 16, 3), 0).unwrap();
        assert!(train_embedder(&c, &EmbedderConfig::default()).is_err());
    }
}

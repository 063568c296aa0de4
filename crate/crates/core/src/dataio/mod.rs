//! Identity-organised face corpora: in-memory representation, loading from
//! `<root>/<identity>/<image>` trees, deterministic splits and a synthetic
//! toy-face generator.

mod split;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{split_corpus, CorpusSplit, SplitManifest, SplitSpec};
pub use synth::synth_corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of scalar values in one image.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(32, 32, 3)
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A channels-last image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    shape: ImageShape,
    data: Vec<f32>,
}

impl FaceImage {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::precondition(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`.
    pub fn from_clamped(shape: ImageShape, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        hwc_to_tensor(&[self.data.as_slice()], self.shape, dtype)
    }

    pub fn to_dynamic(&self) -> image::DynamicImage {
        let quant = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let (w, h) = (self.shape.width as u32, self.shape.height as u32);
        match self.shape.channels {
            1 => image::DynamicImage::ImageLuma8(image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([quant(self.pixel(y as usize, x as usize, 0))])
            })),
            _ => image::DynamicImage::ImageRgb8(image::RgbImage::from_fn(w, h, |x, y| {
                let p = |c| quant(self.pixel(y as usize, x as usize, c));
                image::Rgb([p(0), p(1), p(2)])
            })),
        }
    }
}

/// Stacks channels-last buffers into an `(N, C, H, W)` tensor.
pub fn hwc_to_tensor(items: &[&[f32]], shape: ImageShape, dtype: DType) -> Result<Tensor> {
    let ImageShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let mut out = Vec::with_capacity(items.len() * shape.len());
    for data in items {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(data[(y * w + x) * c + ch]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (items.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits an `(N, C, H, W)` tensor back into channels-last buffers.
pub fn tensor_to_hwc(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    Ok((0..n)
        .map(|i| {
            let src = &flat[i * per..(i + 1) * per];
            let mut dst = vec![0f32; per];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        dst[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
                    }
                }
            }
            dst
        })
        .collect())
}

pub fn images_to_tensor(images: &[FaceImage], dtype: DType) -> Result<Tensor> {
    let shape = images
        .first()
        .ok_or_else(|| Error::precondition("empty image batch"))?
        .shape;
    let refs: Vec<&[f32]> = images.iter().map(|i| i.data.as_slice()).collect();
    hwc_to_tensor(&refs, shape, dtype)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub names: Vec<String>,
    pub images: Vec<FaceImage>,
}

/// Images grouped by identity; identities iterate in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCorpus {
    shape: ImageShape,
    identities: BTreeMap<String, IdentityRecord>,
}

impl IdentityCorpus {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            shape,
            identities: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        identity: impl Into<String>,
        names: Vec<String>,
        images: Vec<FaceImage>,
    ) -> Result<()> {
        let identity = identity.into();
        if self.identities.contains_key(&identity) {
            return Err(Error::precondition(format!(
                "duplicate identity `{identity}`"
            )));
        }
        if names.len() != images.len() {
            return Err(Error::precondition("names and images differ in length"));
        }
        if let Some(bad) = images.iter().find(|i| i.shape != self.shape) {
            return Err(Error::shape(self.shape, bad.shape));
        }
        self.identities
            .insert(identity, IdentityRecord { names, images });
        Ok(())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn total_images(&self) -> usize {
        self.identities.values().map(|r| r.images.len()).sum()
    }

    pub fn get(&self, identity: &str) -> Option<&IdentityRecord> {
        self.identities.get(identity)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.identities.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &IdentityRecord)> {
        self.identities.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every image with its identity index (in iteration order).
    pub fn labelled_images(&self) -> Vec<(usize, &FaceImage)> {
        self.identities
            .values()
            .enumerate()
            .flat_map(|(label, rec)| rec.images.iter().map(move |img| (label, img)))
            .collect()
    }

    /// Sub-corpus restricted to the given identities.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out = Self::new(self.shape);
        for id in ids {
            let rec = self
                .get(id)
                .ok_or_else(|| Error::precondition(format!("unknown identity `{id}`")))?;
            out.insert(id, rec.names.clone(), rec.images.clone())?;
        }
        Ok(out)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes one image file, resizing to `shape` and scaling to `[0, 1]`.
pub fn load_image(path: &Path, shape: ImageShape) -> Result<FaceImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (shape.width as u32, shape.height as u32);
    let resize = |img: image::DynamicImage| {
        if img.width() == w && img.height() == h {
            img
        } else {
            img.resize_exact(w, h, FilterType::Triangle)
        }
    };
    let data: Vec<f32> = match shape.channels {
        1 => resize(img).to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => resize(img).to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        c => {
            return Err(Error::precondition(format!(
                "unsupported channel count {c}"
            )))
        }
    };
    FaceImage::new(shape, data)
}

/// Image files in a directory, lexicographically ordered.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect())
}

/// Loads `<root>/<identity>/<image>` into a corpus.
pub fn load_corpus(root: &Path, shape: ImageShape) -> Result<IdentityCorpus> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root not found"),
        ));
    }
    let mut corpus = IdentityCorpus::new(shape);
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let identity = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "identity directory name is not UTF-8"))?
            .to_string();
        let files = list_images(&dir)?;
        if files.len() < 2 {
            return Err(Error::TooFewImages {
                identity,
                count: files.len(),
                path: dir,
            });
        }
        let mut names = Vec::with_capacity(files.len());
        let mut images = Vec::with_capacity(files.len());
        for f in &files {
            images.push(load_image(f, shape)?);
            names.push(f.file_name().unwrap().to_string_lossy().into_owned());
        }
        corpus.insert(identity, names, images)?;
    }
    if corpus.is_empty() {
        return Err(Error::NoIdentities(root.to_path_buf()));
    }
    Ok(corpus)
}

/// Writes a corpus as 8-bit PNG files in the `<root>/<identity>/<name>` layout.
pub fn save_corpus(corpus: &IdentityCorpus, root: &Path) -> Result<()> {
    for (id, rec) in corpus.iter() {
        let dir = root.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, img) in rec.names.iter().zip(&rec.images) {
            let path = dir.join(Path::new(name).with_extension("png"));
            save_png(img, &path)?;
        }
    }
    Ok(())
}

pub fn save_png(img: &FaceImage, path: &Path) -> Result<()> {
    img.to_dynamic()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

//! On-disk formats for model checkpoints and person-specific masks.
//!
//! Both use the same container: an 8-byte magic, a little-endian u32 format
//! version, a u64 header length, a JSON header and a raw little-endian payload.
//! The header records the payload's SHA-256, so truncation and bit flips are
//! reported as format errors naming the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advnet::{DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel, PerturbationMap, Stage};
use crate::dataio::ImageShape;
use crate::embedder::{EmbedderConfig, EmbedderModel, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::trainer::PersonMask;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ADVCKPT\0";
pub const MASK_MAGIC: [u8; 8] = *b"ADVMASK\0";
pub const FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 of arbitrary bytes, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::precondition(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(path: &Path, s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::format(path, format!("unknown dtype `{s}`"))),
    }
}

fn write_container(path: &Path, magic: [u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_container<H: DeserializeOwned>(path: &Path, magic: [u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || bytes[..8] != magic {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(Error::format(path, "truncated header"));
    }
    let header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok((header, body[hlen..].to_vec()))
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Embedder {
        config: EmbedderConfig,
        classes: usize,
        training_accuracy: Option<f64>,
    },
    Generator {
        config: GeneratorConfig,
        stage: Stage,
        epsilon: f64,
    },
    Discriminator {
        config: DiscriminatorConfig,
        stage: Stage,
    },
}

impl ModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Embedder { .. } => "embedder",
            ModelSpec::Generator { .. } => "generator",
            ModelSpec::Discriminator { .. } => "discriminator",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelSpec,
    image_shape: ImageShape,
    dtype: String,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    content_hash: String,
    code_version: String,
    config_hash: Option<String>,
}

/// Provenance read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelSpec,
    pub image_shape: ImageShape,
    pub content_hash: String,
    pub code_version: String,
    pub config_hash: Option<String>,
}

fn save_store(
    path: &Path,
    model: ModelSpec,
    image_shape: ImageShape,
    store: &ParamStore,
    config_hash: Option<&str>,
) -> Result<()> {
    let snapshot = store.snapshot()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in &snapshot {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
        });
        tensor_bytes(t, &mut payload)?;
    }
    let header = CheckpointHeader {
        model,
        image_shape,
        dtype: dtype_name(store.dtype())?.into(),
        tensors,
        payload_sha256: sha256_hex(&payload),
        content_hash: store.content_hash()?,
        code_version: CODE_VERSION.into(),
        config_hash: config_hash.map(String::from),
    };
    write_container(path, CHECKPOINT_MAGIC, &header, &payload)
}

fn load_store(path: &Path) -> Result<(CheckpointInfo, ParamStore)> {
    let (h, payload): (CheckpointHeader, _) = read_container(path, CHECKPOINT_MAGIC)?;
    if sha256_hex(&payload) != h.payload_sha256 {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    let dtype = parse_dtype(path, &h.dtype)?;
    let width = dtype.size_in_bytes();
    let mut offset = 0;
    let mut tensors = BTreeMap::new();
    for e in &h.tensors {
        let len = e.shape.iter().product::<usize>() * width;
        let bytes = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::format(path, format!("payload too short for `{}`", e.name)))?;
        tensors.insert(e.name.clone(), tensor_from_bytes(bytes, &e.shape, dtype)?);
        offset += len;
    }
    if offset != payload.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let store = ParamStore::from_tensors(tensors, dtype)?;
    if store.content_hash()? != h.content_hash {
        return Err(Error::format(path, "content hash mismatch"));
    }
    let info = CheckpointInfo {
        model: h.model,
        image_shape: h.image_shape,
        content_hash: h.content_hash,
        code_version: h.code_version,
        config_hash: h.config_hash,
    };
    Ok((info, store))
}

/// Reads only the provenance of a checkpoint (the payload is still verified).
pub fn checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    Ok(load_store(path)?.0)
}

pub fn save_embedder(path: &Path, model: &EmbedderModel, config_hash: Option<&str>) -> Result<()> {
    let spec = ModelSpec::Embedder {
        config: model.config().clone(),
        classes: model.classes(),
        training_accuracy: model.training_accuracy(),
    };
    save_store(path, spec, FeatureExtractor::input_shape(model), model.store(), config_hash)
}

pub fn load_embedder(path: &Path) -> Result<EmbedderModel> {
    let (info, store) = load_store(path)?;
    match info.model {
        ModelSpec::Embedder {
            config,
            classes,
            training_accuracy,
        } => EmbedderModel::from_store(config, info.image_shape, classes, store, training_accuracy)
            .map_err(|e| Error::format(path, e.to_string())),
        other => Err(Error::format(path, format!("expected an embedder, found a {}", other.kind_name()))),
    }
}

pub fn save_generator(path: &Path, model: &GeneratorModel, config_hash: Option<&str>) -> Result<()> {
    let spec = ModelSpec::Generator {
        config: model.config().clone(),
        stage: model.stage(),
        epsilon: model.epsilon,
    };
    save_store(path, spec, model.shape(), model.store(), config_hash)
}

pub fn load_generator(path: &Path) -> Result<GeneratorModel> {
    let (info, store) = load_store(path)?;
    match info.model {
        ModelSpec::Generator { config, stage, epsilon } => {
            GeneratorModel::from_store(config, info.image_shape, stage, epsilon, store)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        other => Err(Error::format(path, format!("expected a generator, found a {}", other.kind_name()))),
    }
}

pub fn save_discriminator(path: &Path, model: &DiscriminatorModel, config_hash: Option<&str>) -> Result<()> {
    let spec = ModelSpec::Discriminator {
        config: model.config().clone(),
        stage: model.stage(),
    };
    save_store(path, spec, model.shape(), model.store(), config_hash)
}

pub fn load_discriminator(path: &Path) -> Result<DiscriminatorModel> {
    let (info, store) = load_store(path)?;
    match info.model {
        ModelSpec::Discriminator { config, stage } => {
            DiscriminatorModel::from_store(config, info.image_shape, stage, store)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        other => Err(Error::format(path, format!("expected a discriminator, found a {}", other.kind_name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskHeader {
    dtype: String,
    shape: ImageShape,
    identity: String,
    method: String,
    n_images: usize,
    norm_l2_255: f64,
    generator_hash: Option<String>,
    config_hash: Option<String>,
    code_version: String,
    payload_sha256: String,
}

/// A mask as stored on disk, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFile {
    pub mask: PersonMask,
    pub config_hash: Option<String>,
    pub code_version: String,
}

pub fn save_mask(path: &Path, mask: &PersonMask, config_hash: Option<&str>) -> Result<()> {
    let payload: Vec<u8> = mask.mask.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = MaskHeader {
        dtype: "f32".into(),
        shape: mask.mask.shape(),
        identity: mask.identity.clone(),
        method: mask.method.clone(),
        n_images: mask.n_images,
        norm_l2_255: mask.norm_l2_255(),
        generator_hash: mask.generator_hash.clone(),
        config_hash: config_hash.map(String::from),
        code_version: CODE_VERSION.into(),
        payload_sha256: sha256_hex(&payload),
    };
    write_container(path, MASK_MAGIC, &header, &payload)
}

pub fn load_mask(path: &Path) -> Result<MaskFile> {
    let (h, payload): (MaskHeader, _) = read_container(path, MASK_MAGIC)?;
    if h.dtype != "f32" {
        return Err(Error::format(path, format!("unsupported mask dtype `{}`", h.dtype)));
    }
    if sha256_hex(&payload) != h.payload_sha256 || payload.len() != h.shape.len() * 4 {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
    let mask = PerturbationMap::new(h.shape, data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(MaskFile {
        mask: PersonMask {
            identity: h.identity,
            mask,
            n_images: h.n_images,
            method: h.method,
            generator_hash: h.generator_hash,
        },
        config_hash: h.config_hash,
        code_version: h.code_version,
    })
}

//! Run configuration read from TOML.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::artifact::sha256_hex;
use crate::baselines::FiUapConfig;
use crate::dataio::ImageShape;
use crate::embedder::{Arch, EmbedderConfig, Head};
use crate::error::{Error, Result};
use crate::losses::AdvObjectiveKind;
use crate::trainer::{StageIConfig, StageIIConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `<identity>/<image>` files; synthetic faces when absent.
    pub root: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub synth_identities: usize,
    pub synth_images_per_identity: usize,
    pub synth_seed: u64,
    /// Identities reserved for training the recognition models.
    pub recognition_identities: usize,
    /// Identities reserved for training the cloak generator.
    pub cloak_identities: usize,
    pub n_inference: usize,
    pub n_test: usize,
    pub n_distractors: usize,
    /// Fixes which identities land in which role.
    pub partition_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            height: 32,
            width: 32,
            channels: 3,
            synth_identities: 314,
            synth_images_per_identity: 16,
            synth_seed: 11,
            recognition_identities: 100,
            cloak_identities: 64,
            n_inference: 10,
            n_test: 5,
            n_distractors: 100,
            partition_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }
}

/// A mask-crafting method evaluated by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Two-stage generator with the given stage-II objective.
    AdvCloak(AdvObjectiveKind),
    /// Stage-I perturbations averaged per person.
    AdvFacesPlus,
    FiUap,
    Opom(crate::subspace::HullKind),
    RandomNoise,
}

impl Method {
    pub fn name(&self) -> String {
        use crate::subspace::HullKind;
        match self {
            Method::AdvCloak(AdvObjectiveKind::Plain) => "advcloak".into(),
            Method::AdvCloak(k) => format!("advcloak-{}", k.name()),
            Method::AdvFacesPlus => "advfaces+".into(),
            Method::FiUap => "fi-uap".into(),
            Method::Opom(HullKind::Affine) => "opom-affine".into(),
            Method::Opom(HullKind::Center) => "opom-center".into(),
            Method::Opom(HullKind::Convex) => "opom-convex".into(),
            Method::RandomNoise => "random-noise".into(),
        }
    }

    pub fn uses_generator(&self) -> bool {
        matches!(self, Method::AdvCloak(_) | Method::AdvFacesPlus)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use crate::subspace::HullKind;
        Ok(match s {
            "advfaces+" | "advfaces-plus" => Method::AdvFacesPlus,
            "fi-uap" => Method::FiUap,
            "opom-affine" => Method::Opom(HullKind::Affine),
            "opom-center" => Method::Opom(HullKind::Center),
            "opom-convex" => Method::Opom(HullKind::Convex),
            "random-noise" => Method::RandomNoise,
            "advcloak" => Method::AdvCloak(AdvObjectiveKind::Plain),
            other => match other.strip_prefix("advcloak-") {
                Some(kind) => Method::AdvCloak(kind.parse()?),
                None => return Err(Error::Config(format!("unknown method `{s}`"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Name of the embedder that masks are crafted against.
    pub source: String,
    /// Common mask norm on the 0-255 scale; the size-scaled desk value when absent.
    pub norm_l2_255: Option<f64>,
    pub methods: Vec<Method>,
    pub fi_uap: FiUapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        use crate::subspace::HullKind;
        Self {
            source: "softmax".into(),
            norm_l2_255: None,
            methods: vec![
                Method::AdvCloak(AdvObjectiveKind::Plain),
                Method::AdvCloak(AdvObjectiveKind::Convex),
                Method::AdvFacesPlus,
                Method::FiUap,
                Method::Opom(HullKind::Convex),
                Method::RandomNoise,
            ],
            fi_uap: FiUapConfig::default(),
        }
    }
}

fn default_embedders() -> BTreeMap<String, EmbedderConfig> {
    let make = |arch, head| EmbedderConfig {
        arch,
        head,
        epochs: 12,
        ..Default::default()
    };
    BTreeMap::from([
        ("softmax".to_string(), make(Arch::SmallCnnA, Head::Softmax)),
        ("cosface".to_string(), make(Arch::SmallCnnB, Head::CosfaceMargin)),
        ("arcface".to_string(), make(Arch::SmallCnnC, Head::ArcfaceMargin)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every cloak-side random stream: generator and discriminator
    /// init, batch order, FI-UAP start and noise masks. Seeds written inside
    /// `[stage1]`, `[stage2]` and `[eval.fi_uap]` are replaced by values derived
    /// from it.
    pub seed: u64,
    /// Single-threaded kernels, so repeated runs are bit-identical.
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Recognition models by name; each is a target, one is also the source.
    pub embedders: BTreeMap<String, EmbedderConfig>,
    pub stage1: StageIConfig,
    pub stage2: StageIIConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            out_dir: None,
            data: DataConfig::default(),
            embedders: default_embedders(),
            stage1: StageIConfig {
                epochs: 3,
                ..Default::default()
            },
            // Same rate as stage I: at the library default of 1e-5 a
            // three-epoch toy run barely moves the generator.
            stage2: StageIIConfig {
                learning_rate: 1e-4,
                epochs: 3,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// SHA-256 of the canonical serialisation, so formatting and comments in
    /// the source file do not change it. The output directory is left out.
    pub fn hash(&self) -> String {
        let c = Self {
            out_dir: None,
            ..self.clone()
        };
        sha256_hex(c.to_toml().as_bytes())
    }

    /// Copy with every cloak-side seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.stage1.seed = seed;
        c.stage1.generator.seed = seed.wrapping_mul(4).wrapping_add(1);
        c.stage1.discriminator.seed = seed.wrapping_mul(4).wrapping_add(2);
        c.stage2.seed = seed.wrapping_mul(4).wrapping_add(3);
        c.eval.fi_uap.seed = seed;
        c
    }

    pub fn norm_l2_255(&self) -> f64 {
        self.eval
            .norm_l2_255
            .unwrap_or_else(|| crate::evalharness::desk_norm_target(self.data.shape()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height == 0 || d.width == 0 || d.channels == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if d.root.is_none() {
            let needed = d.recognition_identities + d.cloak_identities + d.n_distractors + 1;
            if d.synth_identities < needed {
                return Err(Error::Config(format!(
                    "synth_identities = {} leaves no evaluation identities (need more than {})",
                    d.synth_identities,
                    needed - 1
                )));
            }
        }
        if self.embedders.is_empty() {
            return Err(Error::Config("at least one embedder is required".into()));
        }
        if !self.embedders.contains_key(&self.eval.source) {
            return Err(Error::Config(format!("source embedder `{}` is not configured", self.eval.source)));
        }
        if let Some(n) = self.eval.norm_l2_255 {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(Error::Config("eval.norm_l2_255 must be finite and >= 0".into()));
            }
        }
        self.stage1.validate().map_err(|e| Error::Config(format!("stage1: {e}")))?;
        self.stage2.validate().map_err(|e| Error::Config(format!("stage2: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.with_seed(1).hash(), c.hash());
        let moved = RunConfig {
            out_dir: Some("elsewhere".into()),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml(
            "seed = 4\n[stage1]\nepochs = 1\n[eval]\nmethods = [\"advcloak-convex\", \"fi-uap\"]\n[embedders.softmax]\narch = \"small_cnn_a\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.stage1.epochs, 1);
        assert_eq!(c.stage1.learning_rate, 1e-4);
        assert_eq!(c.eval.methods, vec![Method::AdvCloak(AdvObjectiveKind::Convex), Method::FiUap]);
        assert_eq!(c.embedders.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sed = 1",
            "[data]\nwidht = 3",
            "[stage1]\nlr = 1",
            "[stage1.generator]\nbase = 3",
            "[eval.fi_uap]\neps = 3",
            "[embedders.softmax]\nlayers = 3",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::from_toml("[eval]\nmethods = [\"magic\"]").is_err());
        assert!(RunConfig::from_toml("[eval]\nsource = \"vgg\"").is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in RunConfig::default().eval.methods {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("advcloak-affine".parse::<Method>().unwrap().name(), "advcloak-affine");
    }
}

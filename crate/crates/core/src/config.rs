//! Run configuration: a TOML document layered over a named profile, with
//! environment and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::car::Ablation;
use crate::data::AugmentationConfig;
use crate::erasing::ErasureConfig;
use crate::graph::GraphConfig;
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::{Error, Result};

pub const PROFILE_ENV: &str = "SRDL_PROFILE";
pub const SEED_ENV: &str = "SRDL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small images and a narrow backbone; runs in minutes on a CPU.
    Desk,
    /// Full-size recipe.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    /// Hold out one record in five (by index hash) for validation.
    pub validation_split: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarConfig {
    pub ablations: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub init: u64,
    pub data: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a checkpoint every this many epochs; the last epoch is always written.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { checkpoint_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub car: CarConfig,
    pub oe: ErasureConfig,
    pub metrics: MetricsConfig,
    pub optim: OptimizerConfig,
    pub augment: AugmentationConfig,
    pub seeds: SeedConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (backbone, optim, augment) = match profile {
            Profile::Desk => (
                BackboneConfig::desk(),
                OptimizerConfig::desk(),
                AugmentationConfig::desk(),
            ),
            Profile::Full => (
                BackboneConfig::full(),
                OptimizerConfig::default(),
                AugmentationConfig::default(),
            ),
        };
        RunConfig {
            profile,
            data: DataConfig {
                validation_split: true,
                ..Default::default()
            },
            backbone,
            graph: GraphConfig::default(),
            car: CarConfig::default(),
            oe: ErasureConfig::default(),
            metrics: MetricsConfig::default(),
            optim,
            augment,
            seeds: SeedConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses `text` over the defaults of its profile. `profile_override`
    /// beats the document's own `profile` key. Relative data paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_owned()))?;
        let profile = match (profile_override, doc.get("profile")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(other)) => {
                return Err(Error::Config(format!("profile must be a string, got {other}")));
            }
            (None, None) => Profile::Desk,
        };
        let mut merged = match toml::Value::try_from(RunConfig::profile(profile)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut merged, doc);
        merged.insert("profile".into(), toml::Value::try_from(profile).expect("profile serializes"));
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_owned()))?;
        for p in [&mut cfg.data.manifest, &mut cfg.data.vocabulary, &mut cfg.data.word_vectors]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applying `SRDL_PROFILE` and `SRDL_SEED` from the
    /// environment, then `seed` (from the command line) on top.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let profile = match std::env::var(PROFILE_ENV) {
            Ok(v) => Some(v.parse()?),
            Err(_) => None,
        };
        let mut cfg = RunConfig::parse(&text, base, profile)?;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(s) = seed.or(env_seed) {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = SeedConfig { init: seed, data: seed };
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation()?;
        self.oe.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if self.backbone.channels.is_empty() || self.backbone.channels.contains(&0) {
            return Err(Error::Config("backbone.channels must be non-empty and positive".into()));
        }
        let stride = self.backbone.stride() as u32;
        if !self.augment.final_size.is_multiple_of(stride) || self.augment.final_size / stride < 2 {
            return Err(Error::Config(format!(
                "augment.final_size {} must be a multiple of the backbone stride {stride} giving at least a 2x2 map",
                self.augment.final_size
            )));
        }
        if self.graph.layers == 0 {
            return Err(Error::Config("graph.layers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config("metrics.threshold must lie in [0, 1]".into()));
        }
        for (key, path) in [
            ("data.manifest", &self.data.manifest),
            ("data.vocabulary", &self.data.vocabulary),
            ("data.word_vectors", &self.data.word_vectors),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(&self.car.ablations)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            graph: self.graph,
            ablation: self.ablation()?,
        })
    }

    /// Hex SHA-256 of everything that shapes the trained model. Data paths,
    /// metric options, output cadence and the epoch count are left out so a
    /// checkpoint can be evaluated on other data or trained further.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("data");
        obj.remove("metrics");
        obj.remove("output");
        obj["optim"].as_object_mut().expect("optim").remove("epochs");
        let mut ablations = self.ablation().map(|a| a.flags()).unwrap_or_default();
        ablations.sort();
        obj["car"] = serde_json::json!({ "ablations": ablations });
        // serde_json maps are sorted, so this text is canonical
        let canonical = serde_json::to_string(&value).expect("json");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub(crate) fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is not set")))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

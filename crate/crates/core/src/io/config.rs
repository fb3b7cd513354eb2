//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": { "variant": "tiny", "mixer": "local-window", "mode": "classification", "seed": 7 },
//!   "train": { "lr": 0.0003, "steps": 300 },
//!   "erf": { "stage": 3, "samples": 16, "image_size": 64 },
//!   "io": { "checkpoint_path": "out/tiny.ckpt", "log_path": "out/train.csv" }
//! }
//! ```
//!
//! Every section is optional. `model.custom` takes a full variant
//! description in place of `model.variant`. Paths are relative to the file.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{Mode, Toggles, VariantConfig};
use crate::error::{Error, Result};
use crate::mixers::MixerKind;
use crate::train::TrainConfig;

/// Overrides the built-in default seed when a config omits one.
pub const SEED_ENV: &str = "UNINEXT_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub custom: Option<VariantConfig>,
    pub mixer: Option<MixerKind>,
    pub mode: Option<Mode>,
    pub toggles: Option<Toggles>,
    pub num_classes: Option<usize>,
    pub ec_before_proj: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErfSection {
    pub stage: usize,
    pub samples: usize,
    pub image_size: usize,
}

impl Default for ErfSection {
    fn default() -> Self {
        ErfSection { stage: 3, samples: 16, image_size: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub erf: ErfSection,
    pub io: IoSection,
}

/// Seed from the environment override, else the built-in default.
pub fn default_seed() -> Result<u64> {
    match env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

impl RunConfig {
    /// Parses a document; `origin` labels diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Usage(format!("{origin}: line {}, column {}: {e}", e.line(), e.column())))?;
        let train_seed_given = value.get("train").and_then(|t| t.get("seed")).is_some();
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Usage(format!("{origin}: line {}, column {}: {}", e.line(), e.column(), strip_position(&e)))
        })?;
        let seed = match cfg.model.seed {
            Some(s) => s,
            None => default_seed()?,
        };
        cfg.model.seed = Some(seed);
        if !train_seed_given {
            cfg.train.seed = seed;
        }
        if cfg.model.variant.is_some() && cfg.model.custom.is_some() {
            return Err(Error::Usage(format!("{origin}: key `model`: give either `variant` or `custom`, not both")));
        }
        Ok(cfg)
    }

    /// Reads a file and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.io.checkpoint_path, &mut cfg.io.log_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.model.seed.unwrap_or(DEFAULT_SEED)
    }

    /// The variant described by the model section.
    pub fn variant(&self) -> Result<VariantConfig> {
        let m = &self.model;
        let mut v = match (&m.custom, &m.variant) {
            (Some(c), _) => c.clone(),
            (None, Some(name)) => VariantConfig::by_name(name)?,
            (None, None) => VariantConfig::tiny(),
        };
        if let Some(k) = m.mixer {
            v.mixer = k;
        }
        if let Some(mode) = m.mode {
            v.mode = mode;
        }
        if let Some(t) = m.toggles {
            v.toggles = t;
        }
        if let Some(n) = m.num_classes {
            v.num_classes = n;
        }
        if let Some(b) = m.ec_before_proj {
            v.ec_before_proj = b;
        }
        v.seed = self.seed();
        v.validate()?;
        Ok(v)
    }

    /// The variant with its head sized for the training set.
    pub fn train_variant(&self) -> Result<VariantConfig> {
        let mut v = self.variant()?;
        if let Some(n) = self.model.num_classes {
            if n != self.train.classes {
                return Err(Error::Usage(format!(
                    "model.num_classes = {n} but train.classes = {}",
                    self.train.classes
                )));
            }
        }
        v.num_classes = self.train.classes;
        Ok(v)
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_tiny() {
        let cfg = RunConfig::parse("{\"model\": {\"seed\": 3}}", "t").unwrap();
        let v = cfg.variant().unwrap();
        assert_eq!(v.channels, [8, 16, 32, 64]);
        assert_eq!(v.seed, 3);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "{\n  \"model\": {\n    \"varient\": \"T\"\n  }\n}";
        let err = RunConfig::parse(text, "cfg.json").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("varient"), "{err}");
    }

    #[test]
    fn explicit_train_seed_is_kept() {
        let cfg = RunConfig::parse("{\"model\": {\"seed\": 3}, \"train\": {\"seed\": 9}}", "t").unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn both_variant_and_custom_rejected() {
        let custom = serde_json::to_string(&VariantConfig::tiny()).unwrap();
        let text = format!("{{\"model\": {{\"seed\": 1, \"variant\": \"T\", \"custom\": {custom}}}}}");
        assert!(RunConfig::parse(&text, "t").is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{\"model\": {\"seed\": 1}, \"io\": {\"checkpoint_path\": \"a/b.ckpt\"}}").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.io.checkpoint_path.unwrap(), dir.path().join("a/b.ckpt"));
    }
}

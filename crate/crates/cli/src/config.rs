use afip_core::afip::AfipConfig;
use afip_core::attn_core::ModelConfig;
use afip_core::harness::{toy_model_config, PathologyConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Top-level run configuration; every field has a default so an empty JSON
/// object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: u32,
    pub model: ModelConfig,
    /// Load decoder weights from this JSON file instead of building the toy
    /// model from the pathology knobs.
    pub model_path: Option<PathBuf>,
    pub afip: AfipConfig,
    pub pathology: PathologyConfig,
    /// Scene suite JSON; `null` uses the bundled suite.
    pub scene_suite: Option<PathBuf>,
    /// Size of the bundled suite when no path is given.
    pub num_scenes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub max_new_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: 1,
            model: toy_model_config(4),
            model_path: None,
            afip: AfipConfig::default(),
            pathology: PathologyConfig::default(),
            scene_suite: None,
            num_scenes: 50,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            max_new_tokens: afip_core::harness::MAX_NEW_TOKENS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("malformed config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            bail!("config field `schema`: unsupported version {}", self.schema);
        }
        self.model
            .validate()
            .map_err(|e| anyhow::anyhow!("config field `model`: {e}"))?;
        self.pathology
            .validate()
            .map_err(|e| anyhow::anyhow!("config field `pathology`: {e}"))?;
        self.afip
            .validate(self.model.num_heads, self.model.num_layers)
            .map_err(|e| anyhow::anyhow!("config field `afip`: {e}"))?;
        if self.seeds.is_empty() {
            bail!("config field `seeds`: at least one seed is required");
        }
        if self.max_new_tokens == 0 {
            bail!("config field `max_new_tokens`: must be >= 1");
        }
        for (field, path) in [
            ("model_path", &self.model_path),
            ("scene_suite", &self.scene_suite),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("config field `{field}`: path {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_valid_config() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip_is_identical() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn missing_paths_are_rejected_with_field_name() {
        let cfg = RunConfig {
            scene_suite: Some(PathBuf::from("/nonexistent/suite.json")),
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("scene_suite"), "{err}");
    }
}

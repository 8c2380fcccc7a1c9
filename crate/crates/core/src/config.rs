//! JSON configuration files: a model preset with optional overrides, the stem,
//! training and audit settings.

use serde::{Deserialize, Serialize};

use crate::audit::Convention;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, STAGES};
use crate::patch_embed::StemLayer;
use crate::train::TrainConfig;

/// The `model` section. A preset is expanded first; explicit fields then override it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<[usize; STAGES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<[usize; STAGES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<[usize; STAGES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<[usize; STAGES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<[usize; STAGES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_ratio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_pre: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_post: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_widths: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub input_h: usize,
    pub input_w: usize,
    pub convention: Convention,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection { input_h: 256, input_w: 256, convention: Convention::MacAsOne }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<Vec<StemLayer>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub audit: AuditSection,
}

/// Parses a config, naming the offending path for schema errors and the
/// line and column for syntax errors.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let (line, col) = (inner.line(), inner.column());
        if path == "." || path.is_empty() {
            Error::config(format!("line {line}, column {col}: {inner}"))
        } else {
            Error::config(format!("at `{path}` (line {line}, column {col}): {inner}"))
        }
    })?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &std::path::Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ConfigFile {
    /// Preset expansion, then overrides, then the stem.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = match &m.preset {
            Some(p) => ModelConfig::preset(p)?,
            None => {
                let missing: Vec<&str> = [
                    ("channels", m.channels.is_none()),
                    ("depths", m.depths.is_none()),
                    ("groups", m.groups.is_none()),
                    ("ratios", m.ratios.is_none()),
                    ("heads", m.heads.is_none()),
                    ("head_widths", m.head_widths.is_none()),
                ]
                .into_iter()
                .filter_map(|(n, miss)| miss.then_some(n))
                .collect();
                if !missing.is_empty() {
                    return Err(Error::config(format!(
                        "model has no preset and lacks {}",
                        missing.iter().map(|n| format!("model.{n}")).collect::<Vec<_>>().join(", ")
                    )));
                }
                // remaining fields fall back to the trainable defaults
                ModelConfig::preset("tiny")?
            }
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = m.$f.clone() { cfg.$f = v; } )* };
        }
        over!(channels, depths, groups, ratios, heads, ffn_ratio, ffn_pre, ffn_post, head_widths, keypoints, input);
        if let Some(stem) = &self.stem {
            cfg.stem = stem.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same file with the model fully spelled out and no preset.
    pub fn expanded(&self) -> Result<ConfigFile> {
        let c = self.model_config()?;
        Ok(ConfigFile {
            model: ModelSection {
                preset: None,
                channels: Some(c.channels),
                depths: Some(c.depths),
                groups: Some(c.groups),
                ratios: Some(c.ratios),
                heads: Some(c.heads),
                ffn_ratio: Some(c.ffn_ratio),
                ffn_pre: Some(c.ffn_pre),
                ffn_post: Some(c.ffn_post),
                head_widths: Some(c.head_widths),
                keypoints: Some(c.keypoints),
                input: Some(c.input),
            },
            stem: Some(c.stem),
            train: self.train.clone(),
            audit: self.audit.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

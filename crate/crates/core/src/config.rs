//! Experiment configuration: one TOML file with `data`, `model`, `rdi`,
//! `protocol` and `analysis` sections. Every field has a default, so an empty
//! file is a valid desk-scale synthetic run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::InterClassMode;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::protocol::ProtocolConfig;
use crate::rdi::RdiConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated planted-redundancy images (`data.synthetic`).
    Synthetic,
    /// A `<root>/<class>/<sample>.png` directory with `index.json`.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory when `source = "folder"`.
    pub root: Option<PathBuf>,
    pub base_classes: usize,
    pub sessions: usize,
    pub way: usize,
    pub shot: usize,
    /// Generator settings when `source = "synthetic"`. Its `seed` fixes the
    /// benchmark itself; the master seed does not change it.
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            base_classes: 12,
            sessions: 8,
            way: 2,
            shot: 5,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Run the diagnostics (patch statistics, distance CDFs, mask alignment).
    pub enabled: bool,
    /// Test samples whose ALR masks are exported as PNG overlays and JSON.
    pub mask_exports: usize,
    pub inter_class_mode: InterClassMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mask_exports: 8,
            inter_class_mode: InterClassMode::ClassMeans,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run name; the run directory is `<run root>/<name>-seed<seed>`.
    pub name: String,
    /// Master seed for schedule sampling, initialization, batch order and the
    /// dummy column.
    pub seed: u64,
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub rdi: RdiConfig,
    pub protocol: ProtocolConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            data: DataConfig::default(),
            model: BackboneConfig::default(),
            rdi: RdiConfig::default(),
            protocol: ProtocolConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config.json` echo of an earlier run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    /// The resolved configuration with every default materialized.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.name, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        let d = &self.data;
        if d.base_classes == 0 {
            return Err(Error::config("data.base_classes", "must be at least 1"));
        }
        if d.sessions > 0 && (d.way == 0 || d.shot == 0) {
            return Err(Error::config("data.way", "way and shot must be positive when sessions > 0"));
        }
        match d.source {
            DataSource::Synthetic => {
                d.synthetic.validate().map_err(|e| Error::config("data.synthetic", e.to_string()))?;
                let needed = d.base_classes + d.sessions * d.way;
                if needed > d.synthetic.class_count {
                    return Err(Error::config(
                        "data.synthetic.class_count",
                        format!("schedule needs {needed} classes, generator makes {}", d.synthetic.class_count),
                    ));
                }
                if d.synthetic.image_size != self.model.input_size {
                    return Err(Error::config(
                        "model.input_size",
                        format!("must equal data.synthetic.image_size ({})", d.synthetic.image_size),
                    ));
                }
            }
            DataSource::Folder => {
                if d.root.is_none() {
                    return Err(Error::config("data.root", "required when source = \"folder\""));
                }
            }
        }
        self.model.validate()?;
        self.rdi.validate()?;
        self.protocol.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let text = "seed = 3\n[rdi]\nlambda = 0.5\n[protocol.optimizer]\nlearning_rate = 0.01\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.rdi.lambda, 0.5);
        let echo = cfg.to_toml_string();
        assert!(echo.contains("[data.synthetic]"));
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap(), cfg);
    }

    #[test]
    fn json_echo_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        };
        fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let unknown = ExperimentConfig::from_toml_str("[rdi]\nlamda = 1.0\n").unwrap_err();
        assert!(unknown.to_string().contains("lamda"), "{unknown}");
        let bad = ExperimentConfig::from_toml_str("[rdi]\nbeta = -1.0\n").unwrap_err();
        assert!(matches!(&bad, Error::Config { field, .. } if field == "rdi.beta"), "{bad}");
        let big = ExperimentConfig::from_toml_str("[data]\nbase_classes = 40\n").unwrap_err();
        assert!(matches!(&big, Error::Config { field, .. } if field == "data.synthetic.class_count"));
        let folder = ExperimentConfig::from_toml_str("[data]\nsource = \"folder\"\n").unwrap_err();
        assert!(matches!(&folder, Error::Config { field, .. } if field == "data.root"));
    }
}

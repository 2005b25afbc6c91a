//! Experiment configs in TOML and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use cff_core::data::Split;
use cff_core::training::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::dataset_files;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses and validates a TOML config. Unknown, missing and out-of-range
/// fields are reported by name.
pub fn parse_config(text: &str, path: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid {
        path: path.to_string(),
        msg: e.to_string().trim_end().to_string(),
    })?;
    cfg.validate().map_err(|e| ConfigError::Invalid {
        path: path.to_string(),
        msg: e.to_string(),
    })?;
    Ok(cfg)
}

/// Loads a TOML config, or the config recorded in a `manifest.json`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            msg: format!("manifest: {e}"),
        })?;
        m.config.validate().map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        return Ok(m.config);
    }
    parse_config(&text, &path.display().to_string())
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configs serialize to TOML")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

pub fn checksum(path: &Path) -> Result<FileChecksum> {
    let data = fs::read(path).map_err(io(path))?;
    let digest = Sha256::digest(&data);
    Ok(FileChecksum {
        path: path.to_path_buf(),
        bytes: data.len() as u64,
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Everything needed to rerun an experiment, written before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: Vec<FileChecksum>,
    pub output_dir: PathBuf,
}

pub const TOOL: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

impl RunManifest {
    pub fn new(config: &ExperimentConfig, data_root: &Path, output_dir: &Path) -> Result<Self> {
        let mut dataset = Vec::new();
        for split in [Split::Train, Split::Test] {
            for f in dataset_files(data_root, config.dataset, split) {
                dataset.push(checksum(&f)?);
            }
        }
        Ok(RunManifest {
            tool: TOOL.to_string(),
            seed: config.seed,
            config: config.clone(),
            dataset,
            output_dir: output_dir.to_path_buf(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifests serialize");
        fs::write(path, text + "\n").map_err(io(path))
    }

    /// Files whose current contents no longer match the recorded checksum.
    pub fn changed_files(&self) -> Vec<PathBuf> {
        self.dataset
            .iter()
            .filter(|f| checksum(&f.path).map_or(true, |c| c != **f))
            .map(|f| f.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "cff_m"
dataset = "mnist"
epochs = 3
[model]
kind = "mlp"
units = 32
layers = 2
"#;

    #[test]
    fn minimal_config_round_trips() {
        let cfg = parse_config(MINIMAL, "t.toml").unwrap();
        assert_eq!(cfg.batch_size, 128);
        let again = parse_config(&to_toml(&cfg), "t.toml").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn errors_name_the_field() {
        let typo = MINIMAL.replace("epochs = 3", "epochs = 3\nepoch = 4");
        let err = parse_config(&typo, "t.toml").unwrap_err().to_string();
        assert!(err.contains("epoch") && err.contains("t.toml"), "{err}");
        let bad = MINIMAL.replace("epochs = 3", "epochs = 3\nval_fraction = 1.5");
        let err = parse_config(&bad, "t.toml").unwrap_err().to_string();
        assert!(err.contains("val_fraction"), "{err}");
        let err = parse_config("dataset = \"mnist\"", "t.toml").unwrap_err().to_string();
        assert!(err.contains("algorithm"), "{err}");
    }

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("abc");
        fs::write(&f, b"abc").unwrap();
        let c = checksum(&f).unwrap();
        assert_eq!(c.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(c.bytes, 3);
    }
}

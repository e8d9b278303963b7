//! Service configuration: a TOML file with environment overrides
//! (`EAGER_LISTEN`, `EAGER_MODEL`, `EAGER_KB`).

use std::fs::File;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use eager_core::detection::DetectionConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSettings {
    pub theta_fine: f64,
    pub theta_coarse: f64,
    pub k_neighbors: usize,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        let d = DetectionConfig::default();
        Self {
            theta_fine: d.theta_fine,
            theta_coarse: d.theta_coarse,
            k_neighbors: d.k_neighbors,
        }
    }
}

impl From<DetectionSettings> for DetectionConfig {
    fn from(s: DetectionSettings) -> Self {
        Self {
            theta_fine: s.theta_fine,
            theta_coarse: s.theta_coarse,
            k_neighbors: s.k_neighbors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSettings {
    pub enabled: bool,
    pub budget: u32,
    pub call_timeout_ms: u64,
    /// Base URL of the agent runtime callback (`POST {url}/reinvoke`,
    /// `POST {url}/replan`). Without it anomalous traces go straight to review.
    pub runtime_url: Option<String>,
}

impl Default for MitigationSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            budget: 2,
            call_timeout_ms: 30_000,
            runtime_url: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbFlush {
    /// Every knowledge write is saved to `kb_path` before it is acknowledged.
    #[default]
    OnWrite,
    /// Knowledge is saved only at shutdown.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PersistenceSettings {
    pub kb_flush: KbFlush,
    /// Optional JSONL log of every emitted verdict.
    pub session_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub model_path: PathBuf,
    pub kb_path: PathBuf,
    pub ui_dir: PathBuf,
    pub detection: DetectionSettings,
    pub mitigation: MitigationSettings,
    pub persistence: PersistenceSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            model_path: "model.bin".into(),
            kb_path: "knowledge.kb".into(),
            ui_dir: "ui/dist".into(),
            detection: DetectionSettings::default(),
            mitigation: MitigationSettings::default(),
            persistence: PersistenceSettings::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `path` if given (defaults otherwise) and applies process
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup("EAGER_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("EAGER_MODEL") {
            self.model_path = v.into();
        }
        if let Some(v) = lookup("EAGER_KB") {
            self.kb_path = v.into();
        }
    }

    pub fn detection_config(&self) -> DetectionConfig {
        self.detection.into()
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        let addr: SocketAddr = self
            .listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen {:?}: {e}", self.listen)))?;
        if addr.port() == 0 {
            return Err(ConfigError::Invalid(
                "listen port must be in 1..=65535".into(),
            ));
        }
        Ok(addr)
    }

    /// Checks everything needed to start serving. A missing knowledge base
    /// file is allowed (the service starts empty and creates it on first
    /// write); an unreadable one is not.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        self.detection_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        File::open(&self.model_path).map_err(|e| {
            ConfigError::Invalid(format!("model_path {}: {e}", self.model_path.display()))
        })?;
        if self.kb_path.exists() {
            File::open(&self.kb_path).map_err(|e| {
                ConfigError::Invalid(format!("kb_path {}: {e}", self.kb_path.display()))
            })?;
        }
        if let Some(url) = &self.mitigation.runtime_url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ConfigError::Invalid(format!(
                    "runtime_url {url:?} is not an http(s) URL"
                )));
            }
        }
        Ok(())
    }
}

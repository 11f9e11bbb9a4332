//! Service configuration, read from a TOML file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::catalog::DEFAULT_SHARE_PREFIX;
use crate::lifecycle::LifecycleConfig;
use crate::model::{Credentials, MemMb};
use crate::provisioner::SimDriverConfig;
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub offline_threshold_seconds: u64,
    /// Scheduler weight `k`.
    pub scheduler_k: f64,
    pub reminder1_fraction: f64,
    pub reminder2_fraction: f64,
    pub vm_memory_mb: MemMb,
    /// Accepted authentication tokens.
    pub tokens: Vec<String>,
    pub credentials: Credentials,
    pub share_prefix: String,
    pub sim_driver: SimDriverConfig,
    /// Directory for saved tables; `None` keeps state in memory only.
    pub persistence_path: Option<PathBuf>,
    pub outbox_path: PathBuf,
    pub service_log: PathBuf,
    /// Wall seconds slept per simulated driver second.
    pub time_scale: f64,
    /// Period of the lease and liveness ticker.
    pub tick_seconds: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let lifecycle = LifecycleConfig::default();
        Self {
            listen_address: "127.0.0.1:8080".to_string(),
            offline_threshold_seconds: 300,
            scheduler_k: 1.0,
            reminder1_fraction: lifecycle.reminder1_fraction,
            reminder2_fraction: lifecycle.reminder2_fraction,
            vm_memory_mb: lifecycle.vm_memory_mb,
            tokens: vec!["change-me".to_string()],
            credentials: Credentials::default(),
            share_prefix: DEFAULT_SHARE_PREFIX.to_string(),
            sim_driver: SimDriverConfig::default(),
            persistence_path: None,
            outbox_path: PathBuf::from("vitl-outbox.jsonl"),
            service_log: PathBuf::from("vitl.log"),
            time_scale: 1.0,
            tick_seconds: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.offline_threshold_seconds == 0 {
            return Err(ConfigError::Invalid("offline_threshold_seconds must be positive".into()));
        }
        if self.tokens.iter().any(|t| t.is_empty()) {
            return Err(ConfigError::Invalid("tokens must not be empty strings".into()));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(ConfigError::Invalid("time_scale must be >= 0".into()));
        }
        if self.tick_seconds == 0 {
            return Err(ConfigError::Invalid("tick_seconds must be positive".into()));
        }
        self.sim_driver
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.lifecycle()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn offline_threshold(&self) -> Duration {
        Duration::from_secs(self.offline_threshold_seconds)
    }

    pub fn lifecycle(&self) -> LifecycleConfig {
        LifecycleConfig {
            scheduler: SchedulerConfig { k: self.scheduler_k },
            reminder1_fraction: self.reminder1_fraction,
            reminder2_fraction: self.reminder2_fraction,
            vm_memory_mb: self.vm_memory_mb,
            default_credentials: self.credentials.clone(),
            share_prefix: self.share_prefix.clone(),
            service_log: self.service_log.display().to_string(),
            ..LifecycleConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ServiceConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ServiceConfig::default());
        assert_eq!(cfg.offline_threshold(), Duration::from_secs(300));
        assert_eq!(cfg.lifecycle().scheduler.k, 1.0);
    }

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        let cfg = ServiceConfig {
            persistence_path: Some("/var/lib/vitl".into()),
            ..ServiceConfig::default()
        };
        assert_eq!(ServiceConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn nested_driver_settings() {
        let cfg = ServiceConfig::from_toml_str(
            r#"
            scheduler_k = 2.0
            tokens = ["a", "b"]

            [sim_driver]
            boot_base_seconds = 22.0
            subnet = "192.168.0.0/24"

            [[sim_driver.failure_script]]
            job_id = 9
            step = "COPY"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.sim_driver.boot_base_seconds, 22.0);
        assert_eq!(cfg.sim_driver.copy_base_seconds, 5.0);
        assert_eq!(cfg.sim_driver.failure_script.len(), 1);
        assert_eq!(cfg.tokens, vec!["a", "b"]);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "scheduler_k = 0.0",
            "reminder1_fraction = 0.95",
            "offline_threshold_seconds = 0",
            "[sim_driver]\nper_vm_slowdown = 0.5",
            "unknown_field = 1",
        ] {
            assert!(ServiceConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}

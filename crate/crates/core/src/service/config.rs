use std::path::PathBuf;

use crate::naming::{NamingError, SecretKey};
use crate::placement::{plan_layout, PlacementError, PlacementPolicy, VaultLayout};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_UPLOAD: u64 = 100 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceConfig {
    pub bind_address: String,
    pub webroot: PathBuf,
    pub vault_dir: PathBuf,
    pub policy: PlacementPolicy,
    /// Key file; when absent the key comes from `VAULT_KEY`.
    pub key_file: Option<PathBuf>,
    pub store_path: PathBuf,
    pub max_upload_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("max upload size must be positive")]
    ZeroUploadLimit,
    #[error("{name} must be an absolute path (got {path})")]
    RelativePath { name: &'static str, path: PathBuf },
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Key(#[from] NamingError),
}

impl ServiceConfig {
    /// Checks the invariants and returns the layout the config implies.
    pub fn validate(&self) -> Result<VaultLayout, ConfigError> {
        if self.max_upload_bytes == 0 {
            return Err(ConfigError::ZeroUploadLimit);
        }
        for (name, path) in [
            ("webroot", &self.webroot),
            ("vault_dir", &self.vault_dir),
            ("store_path", &self.store_path),
        ] {
            if !path.is_absolute() {
                return Err(ConfigError::RelativePath {
                    name,
                    path: path.clone(),
                });
            }
        }
        Ok(plan_layout(self.policy, &self.webroot, &self.vault_dir)?)
    }

    pub fn load_key(&self) -> Result<SecretKey, ConfigError> {
        Ok(SecretKey::load(self.key_file.as_deref())?)
    }
}

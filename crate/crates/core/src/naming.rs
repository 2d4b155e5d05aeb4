//! Opaque storage names.
//!
//! A stored blob is named `hex(digest(username || timestamp || key)).ext`.
//! The operands are juxtaposed as raw octets with no separators, the
//! timestamp is rendered in base 10 without leading zeros, and the key never
//! leaves the server. Because the key is secret, knowing who uploaded a
//! document and when is not enough to reconstruct its name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use md5::Md5;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Minimum accepted length of a server key, in octets.
pub const MIN_KEY_LEN: usize = 16;
/// Maximum accepted length of a server key, in octets.
pub const MAX_KEY_LEN: usize = 64;
/// Environment variable consulted for the key when no key file is given.
pub const KEY_ENV_VAR: &str = "VAULT_KEY";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NamingError {
    #[error("invalid name input: {0}")]
    InvalidInput(&'static str),
    #[error("secret key is {len} octets, at least {MIN_KEY_LEN} required")]
    WeakKey { len: usize },
    #[error("secret key is {len} octets, at most {MAX_KEY_LEN} allowed")]
    OversizedKey { len: usize },
    #[error("no secret key configured (set a key file or {KEY_ENV_VAR})")]
    MissingKey,
    #[error("cannot read key file {path}: {cause}")]
    KeyFile { path: PathBuf, cause: String },
    #[error("malformed opaque name")]
    Malformed,
}

/// Where a [`SecretKey`] was loaded from. Only the provenance is ever
/// displayed, never the key material.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeySource {
    File(PathBuf),
    Env(String),
    Inline,
}

impl fmt::Display for KeySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeySource::File(p) => write!(f, "file {}", p.display()),
            KeySource::Env(v) => write!(f, "environment variable {v}"),
            KeySource::Inline => f.write_str("inline"),
        }
    }
}

/// Server-side secret mixed into every derived name.
///
/// Not `Serialize`, and `Debug` is redacted.
#[derive(Clone)]
pub struct SecretKey {
    bytes: Vec<u8>,
    source: KeySource,
}

impl SecretKey {
    pub fn new(bytes: impl Into<Vec<u8>>, source: KeySource) -> Result<Self, NamingError> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_LEN {
            return Err(NamingError::WeakKey { len: bytes.len() });
        }
        if bytes.len() > MAX_KEY_LEN {
            return Err(NamingError::OversizedKey { len: bytes.len() });
        }
        Ok(SecretKey { bytes, source })
    }

    /// Builds a key without the length floor, for reproducing names minted
    /// by legacy deployments that used short keys. Never used by the loader.
    pub fn legacy_unchecked(bytes: impl Into<Vec<u8>>) -> Self {
        SecretKey {
            bytes: bytes.into(),
            source: KeySource::Inline,
        }
    }

    /// Loads the key from `path` if given, otherwise from [`KEY_ENV_VAR`].
    ///
    /// Key files are read verbatim except that exactly one trailing LF is
    /// stripped if present.
    pub fn load(path: Option<&Path>) -> Result<Self, NamingError> {
        if let Some(path) = path {
            return Self::from_file(path);
        }
        match std::env::var_os(KEY_ENV_VAR) {
            Some(v) if !v.is_empty() => Self::new(
                v.into_encoded_bytes(),
                KeySource::Env(KEY_ENV_VAR.to_string()),
            ),
            _ => Err(NamingError::MissingKey),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, NamingError> {
        let mut bytes = std::fs::read(path).map_err(|e| NamingError::KeyFile {
            path: path.to_path_buf(),
            cause: e.to_string(),
        })?;
        if bytes.last() == Some(&b'\n') {
            bytes.pop();
        }
        Self::new(bytes, KeySource::File(path.to_path_buf()))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn source(&self) -> &KeySource {
        &self.source
    }

    fn expose(&self) -> &[u8] {
        &self.bytes
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("len", &self.bytes.len())
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

/// A file extension as stored: `[a-z0-9]{1,10}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Extension(String);

impl Extension {
    pub fn parse(raw: &str) -> Result<Self, NamingError> {
        let lowered = raw.to_ascii_lowercase();
        if lowered.is_empty() || lowered.len() > 10 {
            return Err(NamingError::InvalidInput("extension must be 1-10 characters"));
        }
        if !lowered
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
        {
            return Err(NamingError::InvalidInput("extension must be alphanumeric"));
        }
        Ok(Extension(lowered))
    }

    /// Extension of an uploaded filename, lowercased. Falls back to `bin`
    /// when the name has no usable extension.
    pub fn from_filename(filename: &str) -> Self {
        filename
            .rsplit_once('.')
            .and_then(|(stem, ext)| (!stem.is_empty()).then_some(ext))
            .and_then(|ext| Self::parse(ext).ok())
            .unwrap_or_else(|| Extension("bin".to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Extension {
    type Error = NamingError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Extension::parse(&value)
    }
}

impl From<Extension> for String {
    fn from(value: Extension) -> Self {
        value.0
    }
}

/// Operands of a name derivation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NameInputs {
    username: String,
    upload_timestamp: i64,
    extension: Extension,
}

impl NameInputs {
    pub fn new(
        username: impl Into<String>,
        upload_timestamp: i64,
        extension: &str,
    ) -> Result<Self, NamingError> {
        let username = username.into();
        if username.is_empty() {
            return Err(NamingError::InvalidInput("username must not be empty"));
        }
        if username.contains('\0') {
            return Err(NamingError::InvalidInput("username must not contain NUL"));
        }
        if upload_timestamp < 0 {
            return Err(NamingError::InvalidInput("timestamp must not be negative"));
        }
        Ok(NameInputs {
            username,
            upload_timestamp,
            extension: Extension::parse(extension)?,
        })
    }

    pub fn username(&self) -> &str {
        &self.username
    }

    pub fn upload_timestamp(&self) -> i64 {
        self.upload_timestamp
    }

    pub fn extension(&self) -> &Extension {
        &self.extension
    }

    /// Same inputs with a different timestamp.
    pub fn at(&self, upload_timestamp: i64) -> Result<Self, NamingError> {
        if upload_timestamp < 0 {
            return Err(NamingError::InvalidInput("timestamp must not be negative"));
        }
        Ok(NameInputs {
            upload_timestamp,
            ..self.clone()
        })
    }
}

/// Hash used for derivation. MD5 is the default; SHA-256 yields 64-char
/// names for deployments that want a longer search space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NameDigest {
    #[default]
    Md5,
    Sha256,
}

impl NameDigest {
    pub fn hex_len(self) -> usize {
        match self {
            NameDigest::Md5 => 32,
            NameDigest::Sha256 => 64,
        }
    }

    fn hex_digest(self, parts: &[&[u8]]) -> String {
        match self {
            NameDigest::Md5 => {
                let mut h = Md5::new();
                parts.iter().for_each(|p| h.update(p));
                hex::encode(h.finalize())
            }
            NameDigest::Sha256 => {
                let mut h = Sha256::new();
                parts.iter().for_each(|p| h.update(p));
                hex::encode(h.finalize())
            }
        }
    }
}

/// A derived storage name: lowercase hex digest plus extension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OpaqueName {
    digest_hex: String,
    extension: Extension,
}

impl OpaqueName {
    pub fn digest_hex(&self) -> &str {
        &self.digest_hex
    }

    pub fn extension(&self) -> &Extension {
        &self.extension
    }
}

fn is_lower_hex(s: &str) -> bool {
    s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn is_digest_stem(stem: &str) -> bool {
    (stem.len() == 32 || stem.len() == 64) && is_lower_hex(stem)
}

impl fmt::Display for OpaqueName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.digest_hex, self.extension.as_str())
    }
}

impl FromStr for OpaqueName {
    type Err = NamingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (stem, ext) = s.split_once('.').ok_or(NamingError::Malformed)?;
        if !is_digest_stem(stem) {
            return Err(NamingError::Malformed);
        }
        let extension = Extension::parse(ext).map_err(|_| NamingError::Malformed)?;
        if extension.as_str() != ext {
            return Err(NamingError::Malformed);
        }
        Ok(OpaqueName {
            digest_hex: stem.to_string(),
            extension,
        })
    }
}

impl TryFrom<String> for OpaqueName {
    type Error = NamingError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<OpaqueName> for String {
    fn from(value: OpaqueName) -> Self {
        value.to_string()
    }
}

/// Derives the storage name for `inputs` with the default MD5 digest.
pub fn derive_opaque_name(inputs: &NameInputs, key: &SecretKey) -> OpaqueName {
    derive_opaque_name_with(NameDigest::Md5, inputs, key)
}

pub fn derive_opaque_name_with(
    digest: NameDigest,
    inputs: &NameInputs,
    key: &SecretKey,
) -> OpaqueName {
    let timestamp = inputs.upload_timestamp.to_string();
    let digest_hex = digest.hex_digest(&[
        inputs.username.as_bytes(),
        timestamp.as_bytes(),
        key.expose(),
    ]);
    OpaqueName {
        digest_hex,
        extension: inputs.extension.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NameClass {
    /// Stem is a hex digest; infeasible to enumerate.
    Opaque,
    /// Stem is a decimal counter such as `1.pdf`; trivially enumerable.
    SequentialGuessable,
    Other,
}

/// Classifies a filename by its stem (the part before the last dot).
pub fn classify_name(filename: &str) -> NameClass {
    let stem = match filename.rsplit_once('.') {
        Some((stem, _)) => stem,
        None => filename,
    };
    if is_digest_stem(stem) {
        NameClass::Opaque
    } else if !stem.is_empty() && stem.bytes().all(|b| b.is_ascii_digit()) {
        NameClass::SequentialGuessable
    } else {
        NameClass::Other
    }
}

//! Vault operations: upload, list, download, delete. The HTTP face lives
//! in [`http`]; the CLI calls these operations directly.

pub mod config;
pub mod http;

use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};

use crate::access::{authorize, Action, Decision, Principal};
use crate::delivery::{
    detect_media_type, stream_document, BlobDir, DeliveryError, RangeSpec, StreamResult,
    DEFAULT_CHUNK_SIZE,
};
use crate::metadata::{
    consistency_sweep, Cursor, DocId, DocumentRecord, MetadataStore, Page, StoreError,
    SweepReport, UPLOAD_TEMP_PREFIX,
};
use crate::naming::{derive_opaque_name_with, Extension, NameDigest, NameInputs, NamingError, SecretKey};
use crate::placement::{verify_layout, LayoutViolation, PlacementError, VaultLayout};

pub use config::{ConfigError, ServiceConfig};

/// Timestamp bumps tried when a user uploads more than once within one
/// second. Large enough for batch clients that upload back to back.
pub const MAX_NAME_ATTEMPTS: i64 = 1024;
pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> i64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

/// A settable clock for tests and reproducible ingest.
#[derive(Debug, Default)]
pub struct FixedClock(AtomicI64);

impl FixedClock {
    pub fn new(at: i64) -> Self {
        FixedClock(AtomicI64::new(at))
    }

    pub fn set(&self, at: i64) {
        self.0.store(at, Ordering::SeqCst);
    }
}

impl Clock for FixedClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VaultError {
    #[error("upload exceeds the {limit}-byte limit")]
    TooLarge { limit: u64 },
    #[error("no free storage name for this user and time")]
    DuplicateOpaqueName,
    #[error("document not found")]
    NotFound,
    #[error("blob missing for a stored record")]
    BlobMissing,
    #[error("range not satisfiable")]
    RangeNotSatisfiable { total: u64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

impl From<DeliveryError> for VaultError {
    fn from(e: DeliveryError) -> Self {
        match e {
            DeliveryError::BlobMissing => VaultError::BlobMissing,
            DeliveryError::RangeNotSatisfiable { total } => VaultError::RangeNotSatisfiable { total },
            DeliveryError::NotAuthorized => VaultError::NotFound,
            DeliveryError::Io(e) => VaultError::Io(e),
            other => VaultError::Io(io::Error::other(other.to_string())),
        }
    }
}

impl From<NamingError> for VaultError {
    fn from(e: NamingError) -> Self {
        VaultError::Invalid(e.to_string())
    }
}

pub struct Vault {
    layout: VaultLayout,
    blobs: BlobDir,
    store: MetadataStore,
    key: SecretKey,
    digest: NameDigest,
    clock: Arc<dyn Clock>,
    max_upload_bytes: u64,
    chunk_size: usize,
    commit: tokio::sync::Mutex<()>,
    layout_guard: std::sync::Mutex<()>,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault")
            .field("policy", &self.layout.policy())
            .finish_non_exhaustive()
    }
}

pub struct VaultBuilder {
    layout: VaultLayout,
    store: MetadataStore,
    key: SecretKey,
    digest: NameDigest,
    clock: Arc<dyn Clock>,
    max_upload_bytes: u64,
    chunk_size: usize,
}

impl VaultBuilder {
    pub fn digest(mut self, digest: NameDigest) -> Self {
        self.digest = digest;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn max_upload_bytes(mut self, limit: u64) -> Self {
        self.max_upload_bytes = limit;
        self
    }

    pub fn chunk_size(mut self, size: usize) -> Self {
        self.chunk_size = size.max(1);
        self
    }

    pub fn build(self) -> Vault {
        Vault {
            blobs: BlobDir::new(self.layout.vault_dir()),
            layout: self.layout,
            store: self.store,
            key: self.key,
            digest: self.digest,
            clock: self.clock,
            max_upload_bytes: self.max_upload_bytes,
            chunk_size: self.chunk_size,
            commit: tokio::sync::Mutex::new(()),
            layout_guard: std::sync::Mutex::new(()),
        }
    }
}

/// Strips any client-side directory part from an uploaded filename.
fn base_filename(name: &str) -> &str {
    name.rsplit(['/', '\\']).next().unwrap_or(name).trim()
}

impl Vault {
    pub fn builder(layout: VaultLayout, store: MetadataStore, key: SecretKey) -> VaultBuilder {
        VaultBuilder {
            layout,
            store,
            key,
            digest: NameDigest::Md5,
            clock: Arc::new(SystemClock),
            max_upload_bytes: config::DEFAULT_MAX_UPLOAD,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }

    /// Opens the vault described by `config`: validates it, loads the key
    /// and opens the store.
    pub fn open(config: &ServiceConfig) -> Result<Self, VaultError> {
        let layout = config.validate()?;
        let key = config.load_key()?;
        let store = MetadataStore::open(&config.store_path)?;
        Ok(Vault::builder(layout, store, key)
            .max_upload_bytes(config.max_upload_bytes)
            .build())
    }

    pub fn layout(&self) -> &VaultLayout {
        &self.layout
    }

    pub fn store(&self) -> &MetadataStore {
        &self.store
    }

    pub fn max_upload_bytes(&self) -> u64 {
        self.max_upload_bytes
    }

    pub fn verify_layout(&self) -> Result<Vec<LayoutViolation>, VaultError> {
        let _guard = self.layout_guard.lock().unwrap();
        Ok(verify_layout(&self.layout)?)
    }

    /// Stores `content` under a derived name and records its metadata.
    ///
    /// The blob is written to a temp file, then renamed into place, so no
    /// partial blob is ever addressable. A failed or oversized upload
    /// leaves neither blob nor record.
    pub async fn upload(
        &self,
        principal: &Principal,
        original_filename: &str,
        content: impl AsyncRead + Unpin,
    ) -> Result<DocumentRecord, VaultError> {
        let original_filename = base_filename(original_filename);
        if original_filename.is_empty() {
            return Err(VaultError::Invalid("filename must not be empty".into()));
        }
        let extension = Extension::from_filename(original_filename);
        let now = self.clock.now();
        let inputs = NameInputs::new(principal.username(), now, extension.as_str())?;

        let temp = self
            .blobs
            .root()
            .join(format!("{UPLOAD_TEMP_PREFIX}{}", uuid::Uuid::new_v4().simple()));
        let written = match self.receive(&temp, content).await {
            Ok(w) => w,
            Err(e) => {
                let _ = tokio::fs::remove_file(&temp).await;
                return Err(e);
            }
        };

        let _commit = self.commit.lock().await;
        for attempt in 0..MAX_NAME_ATTEMPTS {
            let inputs = inputs.at(now + attempt)?;
            let name = derive_opaque_name_with(self.digest, &inputs, &self.key);
            let path = self.blobs.blob_path(&name)?;
            if self.store.contains_opaque_name(&name) || tokio::fs::try_exists(&path).await? {
                continue;
            }
            tokio::fs::rename(&temp, &path).await?;
            sync_dir(self.blobs.root());
            let record = DocumentRecord {
                doc_id: DocId::generate(),
                owner: principal.username().to_string(),
                original_filename: original_filename.to_string(),
                media_type: detect_media_type(original_filename, &written.head),
                size_bytes: written.size,
                upload_timestamp: inputs.upload_timestamp(),
                opaque_name: name,
                checksum: written.checksum,
                policy: self.layout.policy(),
            };
            if let Err(e) = self.store.put_record(record.clone()) {
                let _ = tokio::fs::remove_file(&path).await;
                return Err(e.into());
            }
            tracing::info!(doc_id = %record.doc_id, owner = %record.owner, size = record.size_bytes, "stored document");
            return Ok(record);
        }
        let _ = tokio::fs::remove_file(&temp).await;
        Err(VaultError::DuplicateOpaqueName)
    }

    async fn receive(
        &self,
        temp: &Path,
        mut content: impl AsyncRead + Unpin,
    ) -> Result<Received, VaultError> {
        let mut file = tokio::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(temp)
            .await?;
        let mut hasher = Sha256::new();
        let mut head = Vec::with_capacity(512);
        let mut size = 0u64;
        let mut buf = vec![0u8; self.chunk_size];
        loop {
            let n = content.read(&mut buf).await?;
            if n == 0 {
                break;
            }
            size += n as u64;
            if size > self.max_upload_bytes {
                return Err(VaultError::TooLarge {
                    limit: self.max_upload_bytes,
                });
            }
            let chunk = &buf[..n];
            if head.len() < 512 {
                let take = (512 - head.len()).min(n);
                head.extend_from_slice(&chunk[..take]);
            }
            hasher.update(chunk);
            file.write_all(chunk).await?;
        }
        file.sync_all().await?;
        Ok(Received {
            size,
            checksum: hex::encode(hasher.finalize()),
            head,
        })
    }

    fn authorized(
        &self,
        principal: &Principal,
        doc_id: &DocId,
        action: Action,
    ) -> Result<(DocumentRecord, crate::access::Grant), VaultError> {
        let record = self.store.get_by_id(doc_id).ok_or(VaultError::NotFound)?;
        match authorize(principal, &record, action) {
            Decision::Allowed(grant) => Ok((record, grant)),
            // Existence is not confirmed to non-owners.
            Decision::Denied => Err(VaultError::NotFound),
        }
    }

    pub fn get_record(&self, principal: &Principal, doc_id: &DocId) -> Result<DocumentRecord, VaultError> {
        self.authorized(principal, doc_id, Action::Read).map(|(r, _)| r)
    }

    /// Opens a mediated stream of the document; the download name is the
    /// original filename.
    pub async fn download(
        &self,
        principal: &Principal,
        doc_id: &DocId,
        range: Option<RangeSpec>,
    ) -> Result<StreamResult, VaultError> {
        let (record, grant) = self.authorized(principal, doc_id, Action::Read)?;
        let result = stream_document(&self.blobs, &record, &grant, range, self.chunk_size).await;
        if let Err(DeliveryError::BlobMissing | DeliveryError::SizeMismatch) = &result {
            tracing::error!(doc_id = %doc_id, "integrity fault: blob missing or resized");
        }
        Ok(result?)
    }

    /// The principal's documents; admins see everyone's.
    pub fn list_documents(&self, principal: &Principal, cursor: Option<&Cursor>, limit: usize) -> Page {
        let owner = (!principal.is_admin()).then(|| principal.username());
        self.store
            .list_by_owner(owner, cursor, limit.clamp(1, MAX_PAGE_SIZE))
    }

    /// Removes the record, then the blob. A crash between the two leaves an
    /// orphan blob for the sweep to find, never a dangling record.
    pub async fn delete_document(&self, principal: &Principal, doc_id: &DocId) -> Result<(), VaultError> {
        let (record, _grant) = self.authorized(principal, doc_id, Action::Delete)?;
        let _commit = self.commit.lock().await;
        if !self.store.delete_record(&record.doc_id)? {
            return Err(VaultError::NotFound);
        }
        let path = self.blobs.blob_path(&record.opaque_name)?;
        match tokio::fs::remove_file(&path).await {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    pub fn consistency_sweep(&self) -> Result<SweepReport, VaultError> {
        let _guard = self.layout_guard.lock().unwrap();
        Ok(consistency_sweep(
            &self.store,
            self.layout.vault_dir(),
            self.layout.artifact_names(),
        )?)
    }
}

struct Received {
    size: u64,
    checksum: String,
    head: Vec<u8>,
}

fn sync_dir(dir: &Path) {
    #[cfg(unix)]
    if let Ok(d) = std::fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

//! Document metadata store.
//!
//! Records live in a single append-only journal file; blobs live in the
//! vault directory. Each journal line is `crc32-hex SP json LF` and is
//! fsynced before the in-memory index is updated, so a completed write
//! survives a kill. On open, a torn or corrupt final line is truncated;
//! corruption anywhere else is an error.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::ops::Bound;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::access::ApiToken;
use crate::naming::OpaqueName;
use crate::placement::PlacementPolicy;

/// Server-assigned document identifier, 32 lowercase hex chars. Unrelated
/// to the storage name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DocId(String);

impl DocId {
    pub fn generate() -> Self {
        DocId(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for DocId {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(DocId(s.to_string()))
        } else {
            Err(StoreError::InvalidId)
        }
    }
}

impl TryFrom<String> for DocId {
    type Error = StoreError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<DocId> for String {
    fn from(value: DocId) -> Self {
        value.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: DocId,
    pub owner: String,
    pub original_filename: String,
    pub media_type: String,
    pub size_bytes: u64,
    pub upload_timestamp: i64,
    pub opaque_name: OpaqueName,
    /// Lowercase hex SHA-256 of the blob.
    pub checksum: String,
    pub policy: PlacementPolicy,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("opaque name already in use")]
    DuplicateOpaqueName,
    #[error("document id already in use")]
    DuplicateDocId,
    #[error("malformed document id")]
    InvalidId,
    #[error("malformed cursor")]
    InvalidCursor,
    #[error("store {0} is locked by another process")]
    Locked(PathBuf),
    #[error("journal corrupt at line {line}")]
    Corrupt { line: usize },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Entry {
    PutRecord { record: DocumentRecord },
    DeleteRecord { doc_id: DocId },
    PutToken { token: ApiToken },
    RevokeToken { token_id: String },
}

/// Position in an ordered listing: the last `(upload_timestamp, doc_id)`
/// returned.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cursor {
    upload_timestamp: i64,
    doc_id: DocId,
}

impl fmt::Display for Cursor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.upload_timestamp, self.doc_id)
    }
}

impl FromStr for Cursor {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ts, id) = s.split_once('.').ok_or(StoreError::InvalidCursor)?;
        Ok(Cursor {
            upload_timestamp: ts.parse().map_err(|_| StoreError::InvalidCursor)?,
            doc_id: id.parse().map_err(|_| StoreError::InvalidCursor)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Page {
    pub records: Vec<DocumentRecord>,
    pub next: Option<Cursor>,
}

#[derive(Default)]
struct State {
    records: HashMap<DocId, DocumentRecord>,
    by_name: HashMap<OpaqueName, DocId>,
    order: BTreeSet<(i64, DocId)>,
    by_owner: HashMap<String, BTreeSet<(i64, DocId)>>,
    tokens: HashMap<String, ApiToken>,
}

impl State {
    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::PutRecord { record } => {
                let key = (record.upload_timestamp, record.doc_id.clone());
                self.by_name
                    .insert(record.opaque_name.clone(), record.doc_id.clone());
                self.order.insert(key.clone());
                self.by_owner
                    .entry(record.owner.clone())
                    .or_default()
                    .insert(key);
                self.records.insert(record.doc_id.clone(), record);
            }
            Entry::DeleteRecord { doc_id } => {
                if let Some(record) = self.records.remove(&doc_id) {
                    let key = (record.upload_timestamp, doc_id);
                    self.by_name.remove(&record.opaque_name);
                    self.order.remove(&key);
                    if let Some(set) = self.by_owner.get_mut(&record.owner) {
                        set.remove(&key);
                        if set.is_empty() {
                            self.by_owner.remove(&record.owner);
                        }
                    }
                }
            }
            Entry::PutToken { token } => {
                self.tokens.insert(token.token_id.clone(), token);
            }
            Entry::RevokeToken { token_id } => {
                self.tokens.remove(&token_id);
            }
        }
    }
}

/// Journal-backed metadata store. Shareable across threads; writes are
/// serialized and durable before they become visible.
pub struct MetadataStore {
    path: PathBuf,
    state: RwLock<State>,
    journal: Mutex<File>,
}

impl fmt::Debug for MetadataStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetadataStore")
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

fn frame(entry: &Entry) -> Vec<u8> {
    let json = serde_json::to_vec(entry).expect("journal entries serialize");
    let mut line = format!("{:08x} ", crc32fast::hash(&json)).into_bytes();
    line.extend_from_slice(&json);
    line.push(b'\n');
    line
}

fn unframe(line: &[u8]) -> Option<Entry> {
    let body = line.strip_suffix(b"\n")?;
    if body.len() < 9 || body[8] != b' ' {
        return None;
    }
    let crc = u32::from_str_radix(std::str::from_utf8(&body[..8]).ok()?, 16).ok()?;
    let json = &body[9..];
    if crc32fast::hash(json) != crc {
        return None;
    }
    serde_json::from_slice(json).ok()
}

impl MetadataStore {
    /// Opens (creating if absent) the journal at `path` and replays it.
    /// Takes an exclusive advisory lock on the file for the lifetime of the
    /// store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(path)),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }

        let mut state = State::default();
        let mut valid_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            let mut lines = Vec::new();
            let mut buf = Vec::new();
            loop {
                buf.clear();
                if reader.read_until(b'\n', &mut buf)? == 0 {
                    break;
                }
                lines.push(std::mem::take(&mut buf));
            }
            let count = lines.len();
            for (i, line) in lines.into_iter().enumerate() {
                match unframe(&line) {
                    Some(entry) => {
                        state.apply(entry);
                        valid_len += line.len() as u64;
                    }
                    // torn final write
                    None if i + 1 == count => {
                        tracing::warn!(line = i + 1, "discarding incomplete journal tail");
                        break;
                    }
                    None => return Err(StoreError::Corrupt { line: i + 1 }),
                }
            }
        }
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;

        Ok(MetadataStore {
            path,
            state: RwLock::new(state),
            journal: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, journal: &mut File, entry: Entry) -> Result<(), StoreError> {
        journal.write_all(&frame(&entry))?;
        journal.sync_data()?;
        self.state.write().unwrap().apply(entry);
        Ok(())
    }

    pub fn put_record(&self, record: DocumentRecord) -> Result<DocId, StoreError> {
        let mut journal = self.journal.lock().unwrap();
        {
            let state = self.state.read().unwrap();
            if state.by_name.contains_key(&record.opaque_name) {
                return Err(StoreError::DuplicateOpaqueName);
            }
            if state.records.contains_key(&record.doc_id) {
                return Err(StoreError::DuplicateDocId);
            }
        }
        let id = record.doc_id.clone();
        self.append(&mut journal, Entry::PutRecord { record })?;
        Ok(id)
    }

    pub fn get_by_id(&self, doc_id: &DocId) -> Option<DocumentRecord> {
        self.state.read().unwrap().records.get(doc_id).cloned()
    }

    pub fn get_by_opaque_name(&self, name: &OpaqueName) -> Option<DocumentRecord> {
        let state = self.state.read().unwrap();
        state
            .by_name
            .get(name)
            .and_then(|id| state.records.get(id))
            .cloned()
    }

    pub fn contains_opaque_name(&self, name: &OpaqueName) -> bool {
        self.state.read().unwrap().by_name.contains_key(name)
    }

    /// Records owned by `owner` (or all records when `None`), ordered by
    /// `(upload_timestamp, doc_id)`, starting after `after`.
    pub fn list_by_owner(
        &self,
        owner: Option<&str>,
        after: Option<&Cursor>,
        limit: usize,
    ) -> Page {
        let state = self.state.read().unwrap();
        let empty = BTreeSet::new();
        let index = match owner {
            Some(o) => state.by_owner.get(o).unwrap_or(&empty),
            None => &state.order,
        };
        let mut iter = match after {
            Some(c) => index.range((
                Bound::Excluded((c.upload_timestamp, c.doc_id.clone())),
                Bound::Unbounded,
            )),
            None => index.range::<(i64, DocId), _>(..),
        };
        let records: Vec<DocumentRecord> = iter
            .by_ref()
            .take(limit)
            .map(|(_, id)| state.records[id].clone())
            .collect();
        let next = match (records.last(), iter.next()) {
            (Some(last), Some(_)) => Some(Cursor {
                upload_timestamp: last.upload_timestamp,
                doc_id: last.doc_id.clone(),
            }),
            _ => None,
        };
        Page { records, next }
    }

    pub fn all_records(&self) -> Vec<DocumentRecord> {
        let state = self.state.read().unwrap();
        state
            .order
            .iter()
            .map(|(_, id)| state.records[id].clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes the record. Returns `false` when no such record exists.
    pub fn delete_record(&self, doc_id: &DocId) -> Result<bool, StoreError> {
        let mut journal = self.journal.lock().unwrap();
        if !self.state.read().unwrap().records.contains_key(doc_id) {
            return Ok(false);
        }
        self.append(
            &mut journal,
            Entry::DeleteRecord {
                doc_id: doc_id.clone(),
            },
        )?;
        Ok(true)
    }

    pub fn put_token(&self, token: ApiToken) -> Result<(), StoreError> {
        let mut journal = self.journal.lock().unwrap();
        if self.state.read().unwrap().tokens.contains_key(&token.token_id) {
            return Err(StoreError::DuplicateDocId);
        }
        self.append(&mut journal, Entry::PutToken { token })
    }

    pub fn revoke_token(&self, token_id: &str) -> Result<bool, StoreError> {
        let mut journal = self.journal.lock().unwrap();
        if !self.state.read().unwrap().tokens.contains_key(token_id) {
            return Ok(false);
        }
        self.append(
            &mut journal,
            Entry::RevokeToken {
                token_id: token_id.to_string(),
            },
        )?;
        Ok(true)
    }

    pub fn find_token(&self, token_id: &str) -> Option<ApiToken> {
        self.state.read().unwrap().tokens.get(token_id).cloned()
    }

    pub fn tokens(&self) -> Vec<ApiToken> {
        let mut out: Vec<_> = self.state.read().unwrap().tokens.values().cloned().collect();
        out.sort_by(|a, b| a.token_id.cmp(&b.token_id));
        out
    }
}

/// Lowercase hex SHA-256 of everything `reader` yields.
pub fn sha256_hex(mut reader: impl Read) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Temp-file prefix used for in-flight uploads inside the vault directory.
pub const UPLOAD_TEMP_PREFIX: &str = ".upload-";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    /// Files in the vault with no record.
    pub orphan_blobs: Vec<String>,
    /// Records whose blob is missing.
    pub dangling_records: Vec<DocId>,
    pub size_mismatches: Vec<DocId>,
    pub checksum_mismatches: Vec<ChecksumMismatch>,
    /// Leftover upload temp files.
    pub stale_temp_files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChecksumMismatch {
    pub doc_id: DocId,
    pub expected: String,
    pub actual: String,
}

impl SweepReport {
    pub fn is_clean(&self) -> bool {
        self.orphan_blobs.is_empty()
            && self.dangling_records.is_empty()
            && self.size_mismatches.is_empty()
            && self.checksum_mismatches.is_empty()
            && self.stale_temp_files.is_empty()
    }
}

/// Cross-checks every record against the blobs in `vault_dir`. Files named
/// in `artifacts` (protection files) are ignored.
pub fn consistency_sweep<'a>(
    store: &MetadataStore,
    vault_dir: &Path,
    artifacts: impl IntoIterator<Item = &'a str>,
) -> Result<SweepReport, StoreError> {
    let artifacts: Vec<&str> = artifacts.into_iter().collect();
    let mut report = SweepReport::default();
    let records = store.all_records();

    let mut on_disk = BTreeSet::new();
    for entry in fs::read_dir(vault_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if artifacts.contains(&name.as_str()) {
            continue;
        }
        if name.starts_with(UPLOAD_TEMP_PREFIX) {
            report.stale_temp_files.push(name);
            continue;
        }
        on_disk.insert(name);
    }

    for record in &records {
        let name = record.opaque_name.to_string();
        if !on_disk.remove(&name) {
            report.dangling_records.push(record.doc_id.clone());
            continue;
        }
        let path = vault_dir.join(&name);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                report.dangling_records.push(record.doc_id.clone());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if file.metadata()?.len() != record.size_bytes {
            report.size_mismatches.push(record.doc_id.clone());
        }
        let actual = sha256_hex(file)?;
        if actual != record.checksum {
            report.checksum_mismatches.push(ChecksumMismatch {
                doc_id: record.doc_id.clone(),
                expected: record.checksum.clone(),
                actual,
            });
        }
    }
    report.orphan_blobs = on_disk.into_iter().collect();
    report.stale_temp_files.sort();
    Ok(report)
}

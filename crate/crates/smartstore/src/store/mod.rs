//! The physical record store.
//!
//! Records are immutable: once written under a versioned ID they are never
//! modified or deleted, and new state is expressed by appending the next
//! version. A head map tracks the latest version per nominative ID, moved
//! only through a compare-and-swap, and a reverse-dependency index tracks
//! which heads reference which nominatives. Two backends share this module:
//! a purely in-memory map and a file-backed variant that appends every
//! record to a checksummed log and rebuilds state by replaying it.

mod log;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use thiserror::Error;

use crate::codec::{
    collect_references, content_hash, encode_canonical, CodecError, DocumentValue, HashDigest,
};
use crate::ids::{IdError, NominativeId, Version, VersionedId};

/// Latest version per nominative ID.
pub type HeadMap = BTreeMap<NominativeId, Version>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0} already exists")]
    KeyAlreadyExists(VersionedId),
    #[error("previous record {0} does not exist")]
    DanglingPrevious(VersionedId),
    #[error("stored hash does not match content of {0}")]
    HashMismatch(VersionedId),
    #[error("record {0} not found")]
    RecordNotFound(VersionedId),
    #[error("no record stored under {0}")]
    NominativeNotFound(NominativeId),
    #[error("history of {0} is broken at {1}")]
    BrokenChain(NominativeId, VersionedId),
    #[error("cannot advance head of {0} to missing record version {1}")]
    MissingRecord(VersionedId, Version),
    #[error("head of {0} cannot move backwards")]
    HeadRegression(NominativeId),
    #[error("malformed record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Id(#[from] IdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validity of one record version. Invalid records stay readable; the flag
/// marks them as superseded knowledge rather than deleting them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordStatus {
    Valid,
    Invalid { reason: String },
}

impl RecordStatus {
    pub fn invalid(reason: impl Into<String>) -> Self {
        RecordStatus::Invalid {
            reason: reason.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, RecordStatus::Valid)
    }

    fn to_document(&self) -> DocumentValue {
        match self {
            RecordStatus::Valid => DocumentValue::text("valid"),
            RecordStatus::Invalid { reason } => {
                let mut m = BTreeMap::new();
                m.insert("invalid".to_string(), DocumentValue::text(reason.clone()));
                DocumentValue::Map(m)
            }
        }
    }

    fn from_document(doc: &DocumentValue) -> Result<Self, StoreError> {
        match doc {
            DocumentValue::Text(s) if s == "valid" => Ok(RecordStatus::Valid),
            DocumentValue::Map(m) => match m.get("invalid") {
                Some(DocumentValue::Text(reason)) if m.len() == 1 => {
                    Ok(RecordStatus::invalid(reason.clone()))
                }
                _ => Err(StoreError::InvalidRecord("bad status map".to_string())),
            },
            other => Err(StoreError::InvalidRecord(format!(
                "bad status value of type {}",
                other.type_name()
            ))),
        }
    }
}

/// Who wrote a record, when, within which transaction, and under which
/// permission token. Every record carries one; this is what makes writes
/// traceable after the fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub transaction_id: u64,
    pub role: String,
    pub timestamp: i64,
    pub permission_token: String,
}

impl Origin {
    pub fn to_document(&self) -> DocumentValue {
        let mut m = BTreeMap::new();
        m.insert(
            "permission_token".to_string(),
            DocumentValue::text(self.permission_token.clone()),
        );
        m.insert("role".to_string(), DocumentValue::text(self.role.clone()));
        m.insert(
            "timestamp".to_string(),
            DocumentValue::Timestamp(self.timestamp),
        );
        m.insert(
            "transaction_id".to_string(),
            DocumentValue::Integer(self.transaction_id as i64),
        );
        DocumentValue::Map(m)
    }

    pub fn from_document(doc: &DocumentValue) -> Result<Self, StoreError> {
        let map = doc
            .as_map()
            .ok_or_else(|| StoreError::InvalidRecord("origin is not a map".to_string()))?;
        let text_field = |key: &str| -> Result<String, StoreError> {
            map.get(key)
                .and_then(DocumentValue::as_text)
                .map(str::to_string)
                .ok_or_else(|| StoreError::InvalidRecord(format!("origin missing {key}")))
        };
        let transaction_id = map
            .get("transaction_id")
            .and_then(DocumentValue::as_integer)
            .filter(|n| *n >= 0)
            .ok_or_else(|| {
                StoreError::InvalidRecord("origin missing transaction_id".to_string())
            })?;
        let timestamp = map
            .get("timestamp")
            .and_then(DocumentValue::as_timestamp)
            .ok_or_else(|| StoreError::InvalidRecord("origin missing timestamp".to_string()))?;
        Ok(Origin {
            transaction_id: transaction_id as u64,
            role: text_field("role")?,
            timestamp,
            permission_token: text_field("permission_token")?,
        })
    }
}

/// One immutable version of one object. Fields are private: a record can be
/// inspected but never altered after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    id: VersionedId,
    payload: DocumentValue,
    origin: Origin,
    previous: Option<VersionedId>,
    hash: HashDigest,
    status: RecordStatus,
}

impl StoredRecord {
    /// Builds a record, computing its content hash. The payload must be a
    /// map, and `previous` must name an earlier version of the same
    /// nominative.
    pub fn new(
        id: VersionedId,
        payload: DocumentValue,
        origin: Origin,
        previous: Option<VersionedId>,
        status: RecordStatus,
    ) -> Result<Self, StoreError> {
        validate_shape(&id, &payload, &previous)?;
        let hash = content_hash(&content_document(&payload, &origin, &previous))?;
        Ok(StoredRecord {
            id,
            payload,
            origin,
            previous,
            hash,
            status,
        })
    }

    /// Rebuilds a record from replayed parts, trusting the claimed hash.
    /// Callers decide whether to verify it (replay does, and treats a
    /// mismatch as corruption).
    fn from_parts(
        id: VersionedId,
        payload: DocumentValue,
        origin: Origin,
        previous: Option<VersionedId>,
        hash: HashDigest,
        status: RecordStatus,
    ) -> Result<Self, StoreError> {
        validate_shape(&id, &payload, &previous)?;
        Ok(StoredRecord {
            id,
            payload,
            origin,
            previous,
            hash,
            status,
        })
    }

    pub fn id(&self) -> &VersionedId {
        &self.id
    }

    pub fn payload(&self) -> &DocumentValue {
        &self.payload
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    pub fn previous(&self) -> Option<&VersionedId> {
        self.previous.as_ref()
    }

    pub fn hash(&self) -> &HashDigest {
        &self.hash
    }

    pub fn status(&self) -> &RecordStatus {
        &self.status
    }

    /// Recomputes the content hash and compares it with the stored one.
    pub fn verify_hash(&self) -> bool {
        content_hash(&content_document(&self.payload, &self.origin, &self.previous))
            .map(|h| h == self.hash)
            .unwrap_or(false)
    }

    /// The full six-field document written to the log.
    pub fn to_document(&self) -> DocumentValue {
        let mut m = BTreeMap::new();
        m.insert("id".to_string(), DocumentValue::Reference(self.id.clone()));
        m.insert("payload".to_string(), self.payload.clone());
        m.insert("origin".to_string(), self.origin.to_document());
        m.insert(
            "previous".to_string(),
            match &self.previous {
                Some(p) => DocumentValue::Reference(p.clone()),
                None => DocumentValue::Null,
            },
        );
        m.insert("hash".to_string(), DocumentValue::text(self.hash.to_hex()));
        m.insert("status".to_string(), self.status.to_document());
        DocumentValue::Map(m)
    }

    pub fn from_document(doc: &DocumentValue) -> Result<Self, StoreError> {
        let map = doc
            .as_map()
            .ok_or_else(|| StoreError::InvalidRecord("record frame is not a map".to_string()))?;
        if map.len() != 6 {
            return Err(StoreError::InvalidRecord(format!(
                "record frame has {} fields, expected 6",
                map.len()
            )));
        }
        let field = |key: &str| -> Result<&DocumentValue, StoreError> {
            map.get(key)
                .ok_or_else(|| StoreError::InvalidRecord(format!("record missing {key}")))
        };
        let id = field("id")?
            .as_reference()
            .ok_or_else(|| StoreError::InvalidRecord("record id is not a reference".to_string()))?
            .clone();
        let previous = match field("previous")? {
            DocumentValue::Null => None,
            DocumentValue::Reference(p) => Some(p.clone()),
            other => {
                return Err(StoreError::InvalidRecord(format!(
                    "previous is {}",
                    other.type_name()
                )))
            }
        };
        let hash = field("hash")?
            .as_text()
            .and_then(HashDigest::from_hex)
            .ok_or_else(|| StoreError::InvalidRecord("bad hash field".to_string()))?;
        StoredRecord::from_parts(
            id,
            field("payload")?.clone(),
            Origin::from_document(field("origin")?)?,
            previous,
            hash,
            RecordStatus::from_document(field("status")?)?,
        )
    }
}

fn validate_shape(
    id: &VersionedId,
    payload: &DocumentValue,
    previous: &Option<VersionedId>,
) -> Result<(), StoreError> {
    if payload.as_map().is_none() {
        return Err(StoreError::InvalidRecord(format!(
            "payload of {id} must be a map, got {}",
            payload.type_name()
        )));
    }
    if let Some(prev) = previous {
        if prev.nominative() != id.nominative() {
            return Err(StoreError::InvalidRecord(format!(
                "previous of {id} points at a different object ({prev})"
            )));
        }
        if prev.version() >= id.version() {
            return Err(StoreError::InvalidRecord(format!(
                "previous of {id} must be an earlier version, got {prev}"
            )));
        }
    }
    Ok(())
}

/// Hash input: payload, origin, and previous link. The validity status is
/// deliberately outside the hash so that flagging a record as invalid on a
/// later version does not change what the content bytes attest to.
fn content_document(
    payload: &DocumentValue,
    origin: &Origin,
    previous: &Option<VersionedId>,
) -> DocumentValue {
    let mut m = BTreeMap::new();
    m.insert("payload".to_string(), payload.clone());
    m.insert("origin".to_string(), origin.to_document());
    m.insert(
        "previous".to_string(),
        match previous {
            Some(p) => DocumentValue::Reference(p.clone()),
            None => DocumentValue::Null,
        },
    );
    DocumentValue::Map(m)
}

/// Where the store keeps its records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendConfig {
    Memory,
    File(PathBuf),
}

impl BackendConfig {
    /// Parses the CLI form: `mem` or `file:PATH`.
    pub fn parse(text: &str) -> Option<BackendConfig> {
        if text == "mem" {
            return Some(BackendConfig::Memory);
        }
        let path = text.strip_prefix("file:")?;
        if path.is_empty() {
            return None;
        }
        Some(BackendConfig::File(PathBuf::from(path)))
    }
}

/// What replay found past the end of the valid log prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionReport {
    /// Byte offset of the first frame that failed validation.
    pub offset: u64,
    pub detail: String,
    /// How many records were recovered before the bad frame.
    pub records_recovered: usize,
}

struct StoreInner {
    records: HashMap<VersionedId, Arc<StoredRecord>>,
    heads: HeadMap,
    /// nominative -> set of nominatives whose head references it
    dependents: BTreeMap<NominativeId, BTreeSet<NominativeId>>,
    /// nominative -> set of nominatives its head references
    outgoing: BTreeMap<NominativeId, BTreeSet<NominativeId>>,
}

impl StoreInner {
    fn empty() -> Self {
        StoreInner {
            records: HashMap::new(),
            heads: BTreeMap::new(),
            dependents: BTreeMap::new(),
            outgoing: BTreeMap::new(),
        }
    }

    fn reindex_head(&mut self, nominative: &NominativeId, record: &StoredRecord) {
        if let Some(old) = self.outgoing.remove(nominative) {
            for dependee in old {
                if let Some(set) = self.dependents.get_mut(&dependee) {
                    set.remove(nominative);
                    if set.is_empty() {
                        self.dependents.remove(&dependee);
                    }
                }
            }
        }
        let mut new_out = BTreeSet::new();
        for reference in collect_references(record.payload()) {
            if reference.nominative() != nominative {
                new_out.insert(reference.nominative().clone());
            }
        }
        for dependee in &new_out {
            self.dependents
                .entry(dependee.clone())
                .or_default()
                .insert(nominative.clone());
        }
        if !new_out.is_empty() {
            self.outgoing.insert(nominative.clone(), new_out);
        }
    }
}

/// Thread-safe record store. Reads take a shared lock; appends and head
/// moves are serialized. The commit gate is a separate mutex the
/// transaction engine holds across validate-append-advance sequences.
pub struct Store {
    inner: RwLock<StoreInner>,
    log: Option<Mutex<log::LogWriter>>,
    commit_gate: Mutex<()>,
    txn_seq: AtomicU64,
    fetches: AtomicU64,
    corruption: Option<CorruptionReport>,
}

impl Store {
    /// Opens a backend. A file store replays its log first; if the log has
    /// a corrupt tail, the valid prefix is kept, the tail is truncated away,
    /// and the details are available from [`Store::corruption`].
    pub fn open(config: &BackendConfig) -> Result<Store, StoreError> {
        match config {
            BackendConfig::Memory => Ok(Store {
                inner: RwLock::new(StoreInner::empty()),
                log: None,
                commit_gate: Mutex::new(()),
                txn_seq: AtomicU64::new(1),
                fetches: AtomicU64::new(0),
                corruption: None,
            }),
            BackendConfig::File(path) => Store::open_file(path),
        }
    }

    fn open_file(path: &Path) -> Result<Store, StoreError> {
        let replayed = if path.exists() {
            log::replay(path)?
        } else {
            log::ReplayOutcome {
                frames: Vec::new(),
                valid_len: 0,
                corruption: None,
            }
        };

        let mut inner = StoreInner::empty();
        let mut max_txn = 0u64;
        let mut valid_len = replayed.valid_len;
        let mut corruption = replayed.corruption;
        for frame in &replayed.frames {
            if corruption.is_some() && frame.offset >= valid_len {
                break;
            }
            match Store::validate_frame(&inner, &frame.document) {
                Ok(record) => {
                    max_txn = max_txn.max(record.origin().transaction_id);
                    let id = record.id().clone();
                    let version = id.version();
                    let nominative = id.nominative().clone();
                    inner.records.insert(id, Arc::new(record));
                    let head = inner.heads.entry(nominative).or_insert(version);
                    *head = (*head).max(version);
                }
                Err(detail) => {
                    // Record-level damage counts as corruption just like a
                    // framing failure; keep the prefix before this frame.
                    valid_len = frame.offset;
                    corruption = Some((frame.offset, detail));
                    break;
                }
            }
        }
        let records_recovered = inner.records.len();
        let heads: Vec<NominativeId> = inner.heads.keys().cloned().collect();
        for nominative in heads {
            let version = inner.heads[&nominative];
            let record = Arc::clone(&inner.records[&nominative.versioned(version)]);
            inner.reindex_head(&nominative, &record);
        }

        let writer = log::LogWriter::open(path, valid_len)?;
        Ok(Store {
            inner: RwLock::new(inner),
            log: Some(Mutex::new(writer)),
            commit_gate: Mutex::new(()),
            txn_seq: AtomicU64::new(max_txn + 1),
            fetches: AtomicU64::new(0),
            corruption: corruption.map(|(offset, detail)| CorruptionReport {
                offset,
                detail,
                records_recovered,
            }),
        })
    }

    fn validate_frame(inner: &StoreInner, doc: &DocumentValue) -> Result<StoredRecord, String> {
        let record = StoredRecord::from_document(doc).map_err(|e| e.to_string())?;
        if !record.verify_hash() {
            return Err(format!("content hash mismatch for {}", record.id()));
        }
        if inner.records.contains_key(record.id()) {
            return Err(format!("duplicate record {}", record.id()));
        }
        if let Some(prev) = record.previous() {
            if !inner.records.contains_key(prev) {
                return Err(format!("record {} links to missing {prev}", record.id()));
            }
        }
        Ok(record)
    }

    /// Appends an immutable record. Does not move the head; that is a
    /// separate [`Store::advance_head`] so multi-record commits can stage
    /// everything before publishing.
    pub fn put_record(&self, record: StoredRecord) -> Result<VersionedId, StoreError> {
        let mut inner = self.inner.write().unwrap();
        if inner.records.contains_key(record.id()) {
            return Err(StoreError::KeyAlreadyExists(record.id().clone()));
        }
        if let Some(prev) = record.previous() {
            if !inner.records.contains_key(prev) {
                return Err(StoreError::DanglingPrevious(prev.clone()));
            }
        }
        if !record.verify_hash() {
            return Err(StoreError::HashMismatch(record.id().clone()));
        }
        if let Some(log) = &self.log {
            let bytes = encode_canonical(&record.to_document())?;
            log.lock().unwrap().append(&bytes)?;
        }
        let id = record.id().clone();
        inner.records.insert(id.clone(), Arc::new(record));
        Ok(id)
    }

    pub fn get_record(&self, id: &VersionedId) -> Result<Arc<StoredRecord>, StoreError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        let inner = self.inner.read().unwrap();
        inner
            .records
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::RecordNotFound(id.clone()))
    }

    pub fn contains(&self, id: &VersionedId) -> bool {
        self.inner.read().unwrap().records.contains_key(id)
    }

    pub fn head(&self, nominative: &NominativeId) -> Option<VersionedId> {
        self.head_version(nominative)
            .map(|v| nominative.versioned(v))
    }

    pub fn head_version(&self, nominative: &NominativeId) -> Option<Version> {
        self.inner.read().unwrap().heads.get(nominative).copied()
    }

    /// Compare-and-swap on one head. Returns `false` without changing
    /// anything if the current head differs from `expected`; the new
    /// version must already be stored and ahead of the old head.
    pub fn advance_head(
        &self,
        nominative: &NominativeId,
        expected: Option<Version>,
        new_version: Version,
    ) -> Result<bool, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let current = inner.heads.get(nominative).copied();
        if current != expected {
            return Ok(false);
        }
        if let Some(cur) = current {
            if new_version <= cur {
                return Err(StoreError::HeadRegression(nominative.clone()));
            }
        }
        let id = nominative.versioned(new_version);
        let record = match inner.records.get(&id) {
            Some(r) => Arc::clone(r),
            None => return Err(StoreError::MissingRecord(id, new_version)),
        };
        inner.heads.insert(nominative.clone(), new_version);
        inner.reindex_head(nominative, &record);
        Ok(true)
    }

    /// All versions of one object, newest first, by walking previous links
    /// from the head.
    pub fn history(&self, nominative: &NominativeId) -> Result<Vec<Arc<StoredRecord>>, StoreError> {
        let inner = self.inner.read().unwrap();
        let head = inner
            .heads
            .get(nominative)
            .copied()
            .ok_or_else(|| StoreError::NominativeNotFound(nominative.clone()))?;
        let mut out = Vec::new();
        let mut cursor = Some(nominative.versioned(head));
        while let Some(id) = cursor {
            let record = inner
                .records
                .get(&id)
                .cloned()
                .ok_or_else(|| StoreError::BrokenChain(nominative.clone(), id.clone()))?;
            cursor = record.previous().cloned();
            out.push(record);
        }
        Ok(out)
    }

    pub fn heads_snapshot(&self) -> HeadMap {
        self.inner.read().unwrap().heads.clone()
    }

    pub fn nominatives(&self) -> Vec<NominativeId> {
        self.inner.read().unwrap().heads.keys().cloned().collect()
    }

    /// Every stored record, sorted by ID for deterministic comparison.
    pub fn records_snapshot(&self) -> Vec<Arc<StoredRecord>> {
        let inner = self.inner.read().unwrap();
        let mut out: Vec<Arc<StoredRecord>> = inner.records.values().cloned().collect();
        out.sort_by(|a, b| a.id().cmp(b.id()));
        out
    }

    pub fn record_count(&self) -> usize {
        self.inner.read().unwrap().records.len()
    }

    /// Nominatives whose current head references `nominative`, maintained
    /// incrementally as heads move.
    pub fn dependents_of(&self, nominative: &NominativeId) -> BTreeSet<NominativeId> {
        self.inner
            .read()
            .unwrap()
            .dependents
            .get(nominative)
            .cloned()
            .unwrap_or_default()
    }

    /// Number of record fetches served, to observe read laziness.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    /// Hands out the next transaction ID. Strictly increasing within one
    /// store lifetime and across reopens of a file store.
    pub fn next_transaction_id(&self) -> u64 {
        self.txn_seq.fetch_add(1, Ordering::Relaxed)
    }

    pub fn corruption(&self) -> Option<&CorruptionReport> {
        self.corruption.as_ref()
    }

    /// Serializes commit-time validate/append/advance sequences.
    pub(crate) fn lock_commits(&self) -> MutexGuard<'_, ()> {
        self.commit_gate.lock().unwrap()
    }
}

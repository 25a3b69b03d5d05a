//! Role-scoped transactions with snapshot isolation.
//!
//! A transaction runs as a closure over a [`TransactionContext`]. The
//! context materializes entities lazily into handles, tracks which ones
//! were written, and on commit validates integrity, detects write-write
//! conflicts against the current heads, and publishes new record versions
//! atomically with respect to other committers. Control flow uses the
//! closure's return value: `tx.commit()` and `tx.abort()` both return an
//! exit signal, so `return tx.commit()` (or `tx.commit()?` as the last
//! statement) ends the body. Falling off the end without committing rolls
//! back, as does any error or panic; nothing reaches the store except
//! through a successful commit.
//!
//! Two conflict disciplines are available per transaction:
//!
//! - [`TxMode::Acid`]: first committer wins, the later transaction is
//!   reported as conflicted and writes nothing.
//! - [`TxMode::Base`]: the loser's version is still appended (off-head)
//!   and the head becomes a conflict-set record naming every contender;
//!   readers must resolve it before normal reads resume.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::codec::{encode_canonical, CodecError, DocumentValue};
use crate::ids::{IdError, NominativeId, Version, VersionedId};
use crate::schema::{
    conflict_payload, entity_payload, parse_conflict_payload, parse_entity_payload, ConcreteRole,
    SchemaError, SchemaRegistry, StoreView,
};
use crate::store::{
    BackendConfig, CorruptionReport, HeadMap, Origin, RecordStatus, Store, StoreError,
    StoredRecord,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("entity {0} already exists")]
    AlreadyExists(NominativeId),
    #[error("no entity {0} in this snapshot")]
    NotFound(NominativeId),
    #[error("head of {0} is a conflict set; resolve it before reading")]
    ResolveConflictFirst(NominativeId),
    #[error("head of {0} is not a conflict set")]
    NotAConflict(NominativeId),
    #[error("record {0} is not an entity")]
    NotAnEntity(VersionedId),
    #[error("transaction context is no longer active")]
    InactiveContext,
    #[error("integrity rejected the write: {}", .0.join("; "))]
    IntegrityRejected(Vec<String>),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Id(#[from] IdError),
}

/// How a transaction body asks to exit. Produced by
/// [`TransactionContext::commit`] and [`TransactionContext::abort`], or via
/// `?` on any engine error.
#[derive(Debug)]
pub enum TxSignal {
    Commit,
    Abort,
    Failed(EngineError),
}

/// Body return type: `Ok(())` falls through (rolls back), `Err` carries the
/// exit signal.
pub type TxFlow = Result<(), TxSignal>;

impl From<EngineError> for TxSignal {
    fn from(e: EngineError) -> Self {
        TxSignal::Failed(e)
    }
}

impl From<StoreError> for TxSignal {
    fn from(e: StoreError) -> Self {
        TxSignal::Failed(e.into())
    }
}

impl From<SchemaError> for TxSignal {
    fn from(e: SchemaError) -> Self {
        TxSignal::Failed(e.into())
    }
}

impl From<CodecError> for TxSignal {
    fn from(e: CodecError) -> Self {
        TxSignal::Failed(e.into())
    }
}

impl From<IdError> for TxSignal {
    fn from(e: IdError) -> Self {
        TxSignal::Failed(e.into())
    }
}

/// Conflict discipline for one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxMode {
    Acid,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStatus {
    Committed,
    Aborted,
    Conflicted,
}

/// What happened to a transaction. Errors and panics from the body are
/// captured here rather than propagated, so a worker loop can inspect and
/// decide.
#[derive(Debug)]
pub struct Outcome {
    pub status: TxStatus,
    /// Assigned only if the transaction committed at least one record.
    pub transaction_id: Option<u64>,
    /// Every record written, losers and conflict sets included.
    pub written: Vec<VersionedId>,
    /// Conflict-set records created by a BASE commit.
    pub conflict_sets: Vec<VersionedId>,
    /// Nominatives that made an ACID commit lose.
    pub conflicted: Vec<NominativeId>,
    pub error: Option<EngineError>,
    pub panic_message: Option<String>,
}

impl Outcome {
    fn aborted(error: Option<EngineError>) -> Self {
        Outcome {
            status: TxStatus::Aborted,
            transaction_id: None,
            written: Vec::new(),
            conflict_sets: Vec::new(),
            conflicted: Vec::new(),
            error,
            panic_message: None,
        }
    }

    fn panicked(message: String) -> Self {
        let mut out = Outcome::aborted(None);
        out.panic_message = Some(message);
        out
    }

    fn conflicted(nominatives: Vec<NominativeId>) -> Self {
        Outcome {
            status: TxStatus::Conflicted,
            transaction_id: None,
            written: Vec::new(),
            conflict_sets: Vec::new(),
            conflicted: nominatives,
            error: None,
            panic_message: None,
        }
    }

    pub fn is_committed(&self) -> bool {
        self.status == TxStatus::Committed
    }

    /// The committed version of `nominative`, if this outcome wrote one.
    pub fn written_version(&self, nominative: &NominativeId) -> Option<&VersionedId> {
        self.written
            .iter()
            .find(|id| id.nominative() == nominative)
    }
}

/// The engine: a record store plus a schema registry, a clock, and a
/// default conflict mode. Cheap to clone; clones share the same store.
#[derive(Clone)]
pub struct SmartStore {
    store: Arc<Store>,
    registry: Arc<SchemaRegistry>,
    clock: Arc<dyn Clock>,
    default_mode: TxMode,
}

impl SmartStore {
    pub fn open(config: &BackendConfig, registry: SchemaRegistry) -> Result<Self, StoreError> {
        Ok(SmartStore {
            store: Arc::new(Store::open(config)?),
            registry: Arc::new(registry),
            clock: Arc::new(SystemClock),
            default_mode: TxMode::Acid,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_default_mode(mut self, mode: TxMode) -> Self {
        self.default_mode = mode;
        self
    }

    /// The same underlying store seen through a different schema registry,
    /// e.g. to verify old data against an evolved schema.
    pub fn with_registry(mut self, registry: SchemaRegistry) -> Self {
        self.registry = Arc::new(registry);
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn default_mode(&self) -> TxMode {
        self.default_mode
    }

    pub fn corruption(&self) -> Option<&CorruptionReport> {
        self.store.corruption()
    }

    /// Runs `body` as one transaction under `role` in the default mode.
    pub fn in_transaction<F>(&self, role: &ConcreteRole, body: F) -> Outcome
    where
        F: FnOnce(&TransactionContext) -> TxFlow,
    {
        self.in_transaction_with(role, self.default_mode, body)
    }

    pub fn in_transaction_with<F>(&self, role: &ConcreteRole, mode: TxMode, body: F) -> Outcome
    where
        F: FnOnce(&TransactionContext) -> TxFlow,
    {
        let ctx = self.begin_with(role, mode);
        match catch_unwind(AssertUnwindSafe(|| body(&ctx))) {
            Err(panic) => {
                ctx.roll_back();
                Outcome::panicked(panic_text(panic))
            }
            Ok(Ok(())) => {
                // fell through without asking to commit
                ctx.roll_back();
                Outcome::aborted(None)
            }
            Ok(Err(TxSignal::Abort)) => {
                ctx.roll_back();
                Outcome::aborted(None)
            }
            Ok(Err(TxSignal::Failed(e))) => {
                ctx.roll_back();
                Outcome::aborted(Some(e))
            }
            Ok(Err(TxSignal::Commit)) => ctx.try_commit(),
        }
    }

    /// Opens a context for manual stepping (used by schedulers and tests).
    /// Prefer [`SmartStore::in_transaction`] for ordinary work.
    pub fn begin(&self, role: &ConcreteRole) -> TransactionContext {
        self.begin_with(role, self.default_mode)
    }

    pub fn begin_with(&self, role: &ConcreteRole, mode: TxMode) -> TransactionContext {
        TransactionContext {
            core: Rc::new(RefCell::new(TxCore {
                engine: self.clone(),
                token: format!("role:{}", role.role_id()),
                role: role.clone(),
                mode,
                snapshot: self.store.heads_snapshot(),
                handles: BTreeMap::new(),
                dirty: BTreeSet::new(),
                state: TxState::Active,
            })),
        }
    }

    /// Who wrote the record, when, and under which transaction and token.
    pub fn origin_of(&self, id: &VersionedId) -> Result<Origin, EngineError> {
        Ok(self.store.get_record(id)?.origin().clone())
    }

    /// Origin of the newest version that changed `slot`, found by walking
    /// the history until the slot's value differs from its predecessor.
    pub fn slot_originator(
        &self,
        nominative: &NominativeId,
        slot: &str,
    ) -> Result<Origin, EngineError> {
        let history = self.store.history(nominative)?;
        let slot_value = |record: &StoredRecord| -> Option<DocumentValue> {
            parse_entity_payload(record.payload())
                .and_then(|(_, slots)| slots.get(slot).cloned())
        };
        for pair in history.windows(2) {
            let (newer, older) = (&pair[0], &pair[1]);
            if slot_value(newer) != slot_value(older) {
                return Ok(newer.origin().clone());
            }
        }
        let oldest = history.last().expect("history is never empty");
        Ok(oldest.origin().clone())
    }

    /// Fetches an existing role entity or creates it in a transaction run
    /// by `acting`. Retries when another actor creates it concurrently.
    pub fn get_or_create_role(
        &self,
        acting: &ConcreteRole,
        schema_name: &str,
        nominative: &NominativeId,
    ) -> Result<ConcreteRole, EngineError> {
        let schema = self.registry.get(schema_name)?;
        if !schema.is_role() {
            return Err(SchemaError::NotARole(schema_name.to_string()).into());
        }
        for _ in 0..3 {
            if let Some(head) = self.store.head(nominative) {
                let record = self.store.get_record(&head)?;
                return match parse_entity_payload(record.payload()) {
                    Some((stored, _)) if self.registry.is_kind_of(stored, schema_name)? => {
                        Ok(ConcreteRole::from_record(head))
                    }
                    Some((stored, _)) => Err(SchemaError::TypeMismatch(format!(
                        "{nominative} is a {stored}, not a {schema_name}"
                    ))
                    .into()),
                    None => Err(EngineError::ResolveConflictFirst(nominative.clone())),
                };
            }
            let outcome = self.in_transaction(acting, |tx| {
                tx.create(schema_name, nominative.clone())?;
                tx.commit()
            });
            match outcome.status {
                TxStatus::Committed => {
                    let id = outcome
                        .written_version(nominative)
                        .expect("created entity is in written set")
                        .clone();
                    return Ok(ConcreteRole::from_record(id));
                }
                // lost a race with another creator; loop around and fetch
                TxStatus::Conflicted => continue,
                TxStatus::Aborted => match outcome.error {
                    Some(EngineError::AlreadyExists(_)) => continue,
                    Some(e) => return Err(e),
                    None => return Err(EngineError::InactiveContext),
                },
            }
        }
        Err(EngineError::AlreadyExists(nominative.clone()))
    }

    /// Appends one status-bearing version outside the normal transaction
    /// path, moving the head under the commit gate. Used for revocations
    /// and cascade invalidations where the new version must land even
    /// though its payload is a copy.
    pub(crate) fn raw_append(
        &self,
        role: &ConcreteRole,
        nominative: &NominativeId,
        payload: DocumentValue,
        status: RecordStatus,
    ) -> Result<VersionedId, EngineError> {
        let _gate = self.store.lock_commits();
        let head = self
            .store
            .head_version(nominative)
            .ok_or_else(|| EngineError::NotFound(nominative.clone()))?;
        let version = head + 1;
        let origin = Origin {
            transaction_id: self.store.next_transaction_id(),
            role: role.role_id().to_string(),
            timestamp: self.clock.now_micros(),
            permission_token: format!("role:{}", role.role_id()),
        };
        let record = StoredRecord::new(
            nominative.versioned(version),
            payload,
            origin,
            Some(nominative.versioned(head)),
            status,
        )?;
        let id = self.store.put_record(record)?;
        let advanced = self.store.advance_head(nominative, Some(head), version)?;
        debug_assert!(advanced, "head moved while commit gate was held");
        Ok(id)
    }
}

fn panic_text(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic".to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxState {
    Active,
    Committed,
    Aborted,
}

struct EntityState {
    nominative: NominativeId,
    /// Version this handle was materialized from; `None` for entities
    /// created inside the transaction.
    base_version: Option<Version>,
    schema_name: String,
    slots: BTreeMap<String, DocumentValue>,
}

struct TxCore {
    engine: SmartStore,
    role: ConcreteRole,
    token: String,
    mode: TxMode,
    snapshot: HeadMap,
    handles: BTreeMap<NominativeId, Rc<RefCell<EntityState>>>,
    dirty: BTreeSet<NominativeId>,
    state: TxState,
}

/// One in-flight transaction. Not `Send`: a context lives on the thread
/// that opened it.
pub struct TransactionContext {
    core: Rc<RefCell<TxCore>>,
}

impl TransactionContext {
    pub fn role(&self) -> ConcreteRole {
        self.core.borrow().role.clone()
    }

    pub fn mode(&self) -> TxMode {
        self.core.borrow().mode
    }

    pub fn is_active(&self) -> bool {
        self.core.borrow().state == TxState::Active
    }

    /// The head version of `nominative` as of this transaction's start.
    pub fn snapshot_version(&self, nominative: &NominativeId) -> Option<Version> {
        self.core.borrow().snapshot.get(nominative).copied()
    }

    fn ensure_active(&self) -> Result<(), EngineError> {
        if self.is_active() {
            Ok(())
        } else {
            Err(EngineError::InactiveContext)
        }
    }

    /// Requests a commit; use as the body's final expression.
    pub fn commit(&self) -> TxFlow {
        Err(TxSignal::Commit)
    }

    /// Requests a rollback; use as the body's final expression.
    pub fn abort(&self) -> TxFlow {
        Err(TxSignal::Abort)
    }

    /// Stages a new entity with default slot values. It becomes visible to
    /// others only if the transaction commits.
    pub fn create(
        &self,
        schema_name: &str,
        nominative: NominativeId,
    ) -> Result<EntityHandle, EngineError> {
        self.ensure_active()?;
        let slots = {
            let core = self.core.borrow();
            if core.snapshot.contains_key(&nominative) || core.handles.contains_key(&nominative) {
                return Err(EngineError::AlreadyExists(nominative));
            }
            core.engine.registry.default_slots(schema_name)?
        };
        let state = Rc::new(RefCell::new(EntityState {
            nominative: nominative.clone(),
            base_version: None,
            schema_name: schema_name.to_string(),
            slots,
        }));
        let mut core = self.core.borrow_mut();
        core.handles.insert(nominative.clone(), Rc::clone(&state));
        core.dirty.insert(nominative);
        Ok(EntityHandle {
            core: Rc::clone(&self.core),
            state,
        })
    }

    /// Materializes the entity at its snapshot head. Repeated reads of the
    /// same nominative return the same handle, so writes are visible to the
    /// rest of the body. Reading a conflict-set head is refused.
    pub fn read(&self, nominative: &NominativeId) -> Result<EntityHandle, EngineError> {
        self.ensure_active()?;
        if let Some(state) = self.core.borrow().handles.get(nominative) {
            return Ok(EntityHandle {
                core: Rc::clone(&self.core),
                state: Rc::clone(state),
            });
        }
        let version = self
            .snapshot_version(nominative)
            .ok_or_else(|| EngineError::NotFound(nominative.clone()))?;
        self.materialize(nominative.versioned(version))
    }

    /// Materializes the exact record a reference names, regardless of the
    /// current head. If the nominative was already materialized, that
    /// handle wins.
    pub fn resolve(&self, reference: &VersionedId) -> Result<EntityHandle, EngineError> {
        self.ensure_active()?;
        if let Some(state) = self.core.borrow().handles.get(reference.nominative()) {
            return Ok(EntityHandle {
                core: Rc::clone(&self.core),
                state: Rc::clone(state),
            });
        }
        self.materialize(reference.clone())
    }

    fn materialize(&self, id: VersionedId) -> Result<EntityHandle, EngineError> {
        let record = self.core.borrow().engine.store.get_record(&id)?;
        if parse_conflict_payload(record.payload()).is_some() {
            return Err(EngineError::ResolveConflictFirst(id.nominative().clone()));
        }
        let (schema_name, slots) = parse_entity_payload(record.payload())
            .ok_or_else(|| EngineError::NotAnEntity(id.clone()))?;
        let state = Rc::new(RefCell::new(EntityState {
            nominative: id.nominative().clone(),
            base_version: Some(id.version()),
            schema_name: schema_name.to_string(),
            slots: slots.clone(),
        }));
        self.core
            .borrow_mut()
            .handles
            .insert(id.nominative().clone(), Rc::clone(&state));
        Ok(EntityHandle {
            core: Rc::clone(&self.core),
            state,
        })
    }

    /// Members of the conflict set at the snapshot head of `nominative`.
    pub fn read_conflict(
        &self,
        nominative: &NominativeId,
    ) -> Result<Vec<VersionedId>, EngineError> {
        self.ensure_active()?;
        let version = self
            .snapshot_version(nominative)
            .ok_or_else(|| EngineError::NotFound(nominative.clone()))?;
        let record = self
            .core
            .borrow()
            .engine
            .store
            .get_record(&nominative.versioned(version))?;
        parse_conflict_payload(record.payload())
            .ok_or_else(|| EngineError::NotAConflict(nominative.clone()))
    }

    /// Resolves a conflict by adopting one contender as the working state.
    /// The handle is dirty from the start: committing writes the adopted
    /// state as a new version past the conflict set.
    pub fn adopt_version(&self, source: &VersionedId) -> Result<EntityHandle, EngineError> {
        self.ensure_active()?;
        let nominative = source.nominative().clone();
        let head_version = self
            .snapshot_version(&nominative)
            .ok_or_else(|| EngineError::NotFound(nominative.clone()))?;
        let engine = self.core.borrow().engine.clone();
        let head_record = engine.store.get_record(&nominative.versioned(head_version))?;
        if parse_conflict_payload(head_record.payload()).is_none() {
            return Err(EngineError::NotAConflict(nominative));
        }
        let source_record = engine.store.get_record(source)?;
        let (schema_name, slots) = parse_entity_payload(source_record.payload())
            .ok_or_else(|| EngineError::NotAnEntity(source.clone()))?;

        let mut core = self.core.borrow_mut();
        let state = match core.handles.get(&nominative) {
            Some(existing) => {
                let mut st = existing.borrow_mut();
                st.base_version = Some(head_version);
                st.schema_name = schema_name.to_string();
                st.slots = slots.clone();
                Rc::clone(existing)
            }
            None => {
                let state = Rc::new(RefCell::new(EntityState {
                    nominative: nominative.clone(),
                    base_version: Some(head_version),
                    schema_name: schema_name.to_string(),
                    slots: slots.clone(),
                }));
                core.handles.insert(nominative.clone(), Rc::clone(&state));
                state
            }
        };
        core.dirty.insert(nominative);
        Ok(EntityHandle {
            core: Rc::clone(&self.core),
            state,
        })
    }

    /// Abandons the transaction without writing. Safe to call on an
    /// already-finished context.
    pub fn roll_back(&self) {
        let mut core = self.core.borrow_mut();
        if core.state == TxState::Active {
            core.state = TxState::Aborted;
        }
    }

    /// Runs the commit protocol: integrity gate, conflict detection under
    /// the store's commit lock, then append and head publication.
    pub fn try_commit(&self) -> Outcome {
        if !self.is_active() {
            return Outcome::aborted(Some(EngineError::InactiveContext));
        }
        let engine = self.core.borrow().engine.clone();
        let (role_id, token, mode) = {
            let core = self.core.borrow();
            (core.role.role_id().to_string(), core.token.clone(), core.mode)
        };
        let dirty: Vec<NominativeId> = self.core.borrow().dirty.iter().cloned().collect();
        if dirty.is_empty() {
            self.core.borrow_mut().state = TxState::Committed;
            let mut out = Outcome::aborted(None);
            out.status = TxStatus::Committed;
            return out;
        }

        // Integrity gate: every dirty entity must typecheck and satisfy its
        // domain constraints against this transaction's snapshot.
        let mut problems: Vec<String> = Vec::new();
        {
            let core = self.core.borrow();
            let view = SnapshotView {
                store: &engine.store,
                heads: &core.snapshot,
            };
            for nominative in &dirty {
                let state = core.handles[nominative].borrow();
                match engine
                    .registry
                    .typecheck_collect(&state.schema_name, &state.slots, None)
                {
                    Ok(found) => problems.extend(found),
                    Err(e) => problems.push(e.to_string()),
                }
                match engine.registry.check_domain_constraints(
                    &state.schema_name,
                    &state.slots,
                    &view,
                ) {
                    Ok(issues) => problems.extend(issues.into_iter().map(|i| {
                        if i.crashed {
                            format!("{nominative}: constraint {:?} crashed", i.constraint)
                        } else {
                            format!("{nominative}: constraint {:?} failed", i.constraint)
                        }
                    })),
                    Err(e) => problems.push(e.to_string()),
                }
            }
        }
        if !problems.is_empty() {
            self.core.borrow_mut().state = TxState::Aborted;
            return Outcome::aborted(Some(EngineError::IntegrityRejected(problems)));
        }

        let gate = engine.store.lock_commits();

        let mut conflicted = Vec::new();
        for nominative in &dirty {
            let base = self.core.borrow().handles[nominative].borrow().base_version;
            if engine.store.head_version(nominative) != base {
                conflicted.push(nominative.clone());
            }
        }
        if !conflicted.is_empty() && mode == TxMode::Acid {
            drop(gate);
            self.core.borrow_mut().state = TxState::Aborted;
            return Outcome::conflicted(conflicted);
        }

        let transaction_id = engine.store.next_transaction_id();
        let origin = Origin {
            transaction_id,
            role: role_id,
            timestamp: engine.clock.now_micros(),
            permission_token: token,
        };

        // Stage every record and head move before touching the store.
        struct HeadMove {
            nominative: NominativeId,
            expected: Option<Version>,
            new_version: Version,
        }
        let mut records: Vec<StoredRecord> = Vec::new();
        let mut moves: Vec<HeadMove> = Vec::new();
        let mut written = Vec::new();
        let mut conflict_sets = Vec::new();
        {
            let core = self.core.borrow();
            for nominative in &dirty {
                let state = core.handles[nominative].borrow();
                let live = engine.store.head_version(nominative);
                let payload = entity_payload(&state.schema_name, &state.slots);
                let build = |version: Version,
                             payload: DocumentValue,
                             previous: Option<Version>|
                 -> Result<StoredRecord, StoreError> {
                    StoredRecord::new(
                        nominative.versioned(version),
                        payload,
                        origin.clone(),
                        previous.map(|v| nominative.versioned(v)),
                        RecordStatus::Valid,
                    )
                };
                if live == state.base_version {
                    let version = live.map_or(1, |v| v + 1);
                    match build(version, payload, live) {
                        Ok(record) => {
                            written.push(record.id().clone());
                            records.push(record);
                            moves.push(HeadMove {
                                nominative: nominative.clone(),
                                expected: live,
                                new_version: version,
                            });
                        }
                        Err(e) => {
                            drop(state);
                            drop(core);
                            drop(gate);
                            self.core.borrow_mut().state = TxState::Aborted;
                            return Outcome::aborted(Some(e.into()));
                        }
                    }
                } else {
                    // BASE path: keep the losing write as an off-head
                    // version and put a conflict set at the head.
                    let live_version =
                        live.expect("a conflicting head exists by definition");
                    let head_id = nominative.versioned(live_version);
                    let head_record = match engine.store.get_record(&head_id) {
                        Ok(r) => r,
                        Err(e) => {
                            drop(state);
                            drop(core);
                            drop(gate);
                            self.core.borrow_mut().state = TxState::Aborted;
                            return Outcome::aborted(Some(e.into()));
                        }
                    };
                    let loser_version = live_version + 1;
                    let loser_id = nominative.versioned(loser_version);
                    let mut members = match parse_conflict_payload(head_record.payload()) {
                        // the head is already a conflict set: flatten
                        Some(existing) => existing,
                        None => vec![head_id.clone()],
                    };
                    members.push(loser_id.clone());
                    let set_version = live_version + 2;
                    let set_id = nominative.versioned(set_version);
                    let staged = build(loser_version, payload, state.base_version).and_then(
                        |loser| {
                            let set = StoredRecord::new(
                                set_id.clone(),
                                conflict_payload(&members),
                                origin.clone(),
                                Some(head_id.clone()),
                                RecordStatus::Valid,
                            )?;
                            Ok((loser, set))
                        },
                    );
                    match staged {
                        Ok((loser, set)) => {
                            written.push(loser.id().clone());
                            written.push(set_id.clone());
                            conflict_sets.push(set_id);
                            records.push(loser);
                            records.push(set);
                            moves.push(HeadMove {
                                nominative: nominative.clone(),
                                expected: live,
                                new_version: set_version,
                            });
                        }
                        Err(e) => {
                            drop(state);
                            drop(core);
                            drop(gate);
                            self.core.borrow_mut().state = TxState::Aborted;
                            return Outcome::aborted(Some(e.into()));
                        }
                    }
                }
            }
        }

        for record in records {
            if let Err(e) = engine.store.put_record(record) {
                drop(gate);
                self.core.borrow_mut().state = TxState::Aborted;
                return Outcome::aborted(Some(e.into()));
            }
        }
        for m in &moves {
            let advanced = engine
                .store
                .advance_head(&m.nominative, m.expected, m.new_version)
                .expect("staged head move is valid");
            debug_assert!(advanced, "head moved while commit gate was held");
        }
        drop(gate);

        self.core.borrow_mut().state = TxState::Committed;
        Outcome {
            status: TxStatus::Committed,
            transaction_id: Some(transaction_id),
            written,
            conflict_sets,
            conflicted: Vec::new(),
            error: None,
            panic_message: None,
        }
    }
}

/// A read view pinned to one transaction's snapshot: heads come from the
/// snapshot, record bodies from the shared store.
struct SnapshotView<'a> {
    store: &'a Store,
    heads: &'a HeadMap,
}

impl StoreView for SnapshotView<'_> {
    fn head_version(&self, nominative: &NominativeId) -> Option<Version> {
        self.heads.get(nominative).copied()
    }

    fn get_record(&self, id: &VersionedId) -> Option<Arc<StoredRecord>> {
        self.store.get_record(id).ok()
    }
}

/// A working copy of one entity inside a transaction. All handles for the
/// same nominative within one transaction share state.
pub struct EntityHandle {
    core: Rc<RefCell<TxCore>>,
    state: Rc<RefCell<EntityState>>,
}

impl EntityHandle {
    pub fn nominative(&self) -> NominativeId {
        self.state.borrow().nominative.clone()
    }

    pub fn schema_name(&self) -> String {
        self.state.borrow().schema_name.clone()
    }

    /// Version this handle was materialized from; `None` if created here.
    pub fn base_version(&self) -> Option<Version> {
        self.state.borrow().base_version
    }

    fn ensure_active(&self) -> Result<(), EngineError> {
        if self.core.borrow().state == TxState::Active {
            Ok(())
        } else {
            Err(EngineError::InactiveContext)
        }
    }

    pub fn get(&self, slot: &str) -> Result<DocumentValue, EngineError> {
        self.ensure_active()?;
        let state = self.state.borrow();
        state.slots.get(slot).cloned().ok_or_else(|| {
            SchemaError::TypeMismatch(format!(
                "{} has no slot {slot:?}",
                state.schema_name
            ))
            .into()
        })
    }

    /// Writes a slot value and marks the entity dirty. Full type and
    /// domain validation runs at commit.
    pub fn set(&self, slot: &str, value: DocumentValue) -> Result<(), EngineError> {
        self.ensure_active()?;
        {
            let mut state = self.state.borrow_mut();
            if !state.slots.contains_key(slot) {
                return Err(SchemaError::TypeMismatch(format!(
                    "{} has no slot {slot:?}",
                    state.schema_name
                ))
                .into());
            }
            state.slots.insert(slot.to_string(), value);
        }
        let nominative = self.state.borrow().nominative.clone();
        self.core.borrow_mut().dirty.insert(nominative);
        Ok(())
    }

    /// Adds an element to a set slot. Returns `false` (and stays clean) if
    /// an equal element, by canonical bytes, is already present.
    pub fn add_to_set(&self, slot: &str, value: DocumentValue) -> Result<bool, EngineError> {
        self.ensure_active()?;
        let added = {
            let mut state = self.state.borrow_mut();
            let current = state.slots.get(slot).ok_or_else(|| {
                EngineError::from(SchemaError::TypeMismatch(format!(
                    "{} has no slot {slot:?}",
                    state.schema_name
                )))
            })?;
            let items = match current {
                DocumentValue::Array(items) => items.clone(),
                other => {
                    return Err(SchemaError::TypeMismatch(format!(
                        "slot {slot:?} holds {}, not a set",
                        other.type_name()
                    ))
                    .into())
                }
            };
            let new_bytes = encode_canonical(&value)?;
            let mut exists = false;
            for item in &items {
                if encode_canonical(item)? == new_bytes {
                    exists = true;
                    break;
                }
            }
            if exists {
                false
            } else {
                let mut items = items;
                items.push(value);
                state.slots.insert(slot.to_string(), DocumentValue::Array(items));
                true
            }
        };
        if added {
            let nominative = self.state.borrow().nominative.clone();
            self.core.borrow_mut().dirty.insert(nominative);
        }
        Ok(added)
    }

    /// A reference to this entity as it will exist if the transaction
    /// commits: the base version for read entities, version 1 for ones
    /// created here.
    pub fn reference(&self) -> DocumentValue {
        let state = self.state.borrow();
        DocumentValue::Reference(
            state
                .nominative
                .versioned(state.base_version.unwrap_or(1)),
        )
    }

    /// A copy of the current working slots.
    pub fn slots(&self) -> BTreeMap<String, DocumentValue> {
        self.state.borrow().slots.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::schema::{AtomicType, EntitySchema};

    fn nom(name: &str) -> NominativeId {
        NominativeId::parse(name).unwrap()
    }

    fn registry() -> SchemaRegistry {
        let registry = SchemaRegistry::new();
        registry
            .register(
                EntitySchema::builder("Note")
                    .slot("text", AtomicType::Text)
                    .slot("count", AtomicType::Integer)
                    .slot("tags", AtomicType::set_of(AtomicType::Text))
                    .slot("next", AtomicType::ref_to("Note"))
                    .role()
                    .build(),
            )
            .unwrap();
        registry
            .register(
                EntitySchema::builder("Bounded")
                    .slot("n", AtomicType::Integer)
                    .constraint("n below 100", |slots, _| {
                        slots["n"].as_integer().unwrap() < 100
                    })
                    .build(),
            )
            .unwrap();
        registry
    }

    fn engine() -> SmartStore {
        SmartStore::open(&BackendConfig::Memory, registry())
            .unwrap()
            .with_clock(Arc::new(VirtualClock::new(7_000)))
    }

    fn tester() -> ConcreteRole {
        ConcreteRole::super_user()
    }

    fn create_note(engine: &SmartStore, name: &str, text: &str) -> VersionedId {
        let outcome = engine.in_transaction(&tester(), |tx| {
            let note = tx.create("Note", nom(name))?;
            note.set("text", DocumentValue::text(text))?;
            tx.commit()
        });
        assert!(outcome.is_committed(), "{outcome:?}");
        outcome.written_version(&nom(name)).unwrap().clone()
    }

    #[test]
    fn create_and_commit_writes_version_one() {
        let engine = engine();
        let id = create_note(&engine, "a", "hello");
        assert_eq!(id, nom("a").versioned(1));
        assert_eq!(engine.store().head(&nom("a")), Some(id.clone()));

        let record = engine.store().get_record(&id).unwrap();
        let (schema, slots) = parse_entity_payload(record.payload()).unwrap();
        assert_eq!(schema, "Note");
        assert_eq!(slots["text"], DocumentValue::text("hello"));
        assert_eq!(slots["count"], DocumentValue::Integer(0)); // default
        assert!(record.previous().is_none());
        assert!(record.status().is_valid());

        let origin = record.origin();
        assert_eq!(origin.role, "super-user");
        assert_eq!(origin.permission_token, "role:super-user");
        assert_eq!(origin.timestamp, 7_000);
        assert!(origin.transaction_id >= 1);
    }

    #[test]
    fn update_appends_and_links_previous() {
        let engine = engine();
        create_note(&engine, "a", "v1");
        let outcome = engine.in_transaction(&tester(), |tx| {
            let note = tx.read(&nom("a"))?;
            note.set("text", DocumentValue::text("v2"))?;
            tx.commit()
        });
        assert!(outcome.is_committed());
        assert_eq!(outcome.written, vec![nom("a").versioned(2)]);

        let history = engine.store().history(&nom("a")).unwrap();
        assert_eq!(history.len(), 2);
        assert_eq!(history[0].previous(), Some(&nom("a").versioned(1)));
        let (_, old_slots) = parse_entity_payload(history[1].payload()).unwrap();
        assert_eq!(old_slots["text"], DocumentValue::text("v1"));
    }

    #[test]
    fn falling_through_abort_and_error_all_roll_back() {
        let engine = engine();
        create_note(&engine, "a", "kept");

        let fell_through = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("lost"))?;
            Ok(())
        });
        assert_eq!(fell_through.status, TxStatus::Aborted);

        let aborted = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("lost"))?;
            tx.abort()
        });
        assert_eq!(aborted.status, TxStatus::Aborted);

        let failed = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("lost"))?;
            tx.read(&nom("missing"))?;
            tx.commit()
        });
        assert_eq!(failed.status, TxStatus::Aborted);
        assert!(matches!(failed.error, Some(EngineError::NotFound(_))));

        let record = engine
            .store()
            .get_record(&nom("a").versioned(1))
            .unwrap();
        let (_, slots) = parse_entity_payload(record.payload()).unwrap();
        assert_eq!(slots["text"], DocumentValue::text("kept"));
        assert_eq!(engine.store().head_version(&nom("a")), Some(1));
    }

    #[test]
    fn panics_become_aborted_outcomes() {
        let engine = engine();
        create_note(&engine, "a", "kept");
        let hook = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let outcome = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("lost"))?;
            panic!("boom {}", 42);
        });
        std::panic::set_hook(hook);
        assert_eq!(outcome.status, TxStatus::Aborted);
        assert_eq!(outcome.panic_message.as_deref(), Some("boom 42"));
        assert_eq!(engine.store().record_count(), 1);
    }

    #[test]
    fn snapshot_isolation_hides_later_commits() {
        let engine = engine();
        create_note(&engine, "a", "original");

        let tx1 = engine.begin(&tester());
        // another transaction commits while tx1 is open
        let other = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("updated"))?;
            tx.commit()
        });
        assert!(other.is_committed());

        let note = tx1.read(&nom("a")).unwrap();
        assert_eq!(note.get("text").unwrap(), DocumentValue::text("original"));
        tx1.roll_back();
    }

    #[test]
    fn first_committer_wins_in_acid_mode() {
        let engine = engine();
        create_note(&engine, "a", "base");

        let tx1 = engine.begin(&tester());
        let tx2 = engine.begin(&tester());
        tx1.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("one"))
            .unwrap();
        tx2.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("two"))
            .unwrap();

        assert!(tx1.try_commit().is_committed());
        let second = tx2.try_commit();
        assert_eq!(second.status, TxStatus::Conflicted);
        assert_eq!(second.conflicted, vec![nom("a")]);
        assert!(second.written.is_empty());
        assert_eq!(engine.store().head_version(&nom("a")), Some(2));
        assert_eq!(engine.store().record_count(), 2);
    }

    #[test]
    fn disjoint_writes_do_not_conflict() {
        let engine = engine();
        create_note(&engine, "a", "x");
        create_note(&engine, "b", "y");

        let tx1 = engine.begin(&tester());
        let tx2 = engine.begin(&tester());
        tx1.read(&nom("a"))
            .unwrap()
            .set("count", DocumentValue::Integer(1))
            .unwrap();
        tx2.read(&nom("b"))
            .unwrap()
            .set("count", DocumentValue::Integer(2))
            .unwrap();
        assert!(tx1.try_commit().is_committed());
        assert!(tx2.try_commit().is_committed());
    }

    #[test]
    fn base_mode_turns_conflicts_into_conflict_sets() {
        let engine = engine();
        create_note(&engine, "a", "base");

        let tx1 = engine.begin_with(&tester(), TxMode::Base);
        let tx2 = engine.begin_with(&tester(), TxMode::Base);
        tx1.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("one"))
            .unwrap();
        tx2.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("two"))
            .unwrap();

        let first = tx1.try_commit();
        assert!(first.is_committed());
        assert!(first.conflict_sets.is_empty());

        let second = tx2.try_commit();
        assert!(second.is_committed());
        assert_eq!(second.conflict_sets, vec![nom("a").versioned(4)]);
        // loser landed as version 3, conflict set as version 4
        assert_eq!(second.written, vec![nom("a").versioned(3), nom("a").versioned(4)]);
        assert_eq!(engine.store().head_version(&nom("a")), Some(4));

        let head = engine
            .store()
            .get_record(&nom("a").versioned(4))
            .unwrap();
        let members = parse_conflict_payload(head.payload()).unwrap();
        assert_eq!(
            members,
            vec![nom("a").versioned(2), nom("a").versioned(3)]
        );
        // superseded winner head is the previous link
        assert_eq!(head.previous(), Some(&nom("a").versioned(2)));

        // normal reads refuse the conflicted head
        let read = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?;
            tx.commit()
        });
        assert!(matches!(
            read.error,
            Some(EngineError::ResolveConflictFirst(_))
        ));

        // all contenders remain readable
        for v in 1..=4 {
            assert!(engine.store().contains(&nom("a").versioned(v)));
        }
    }

    #[test]
    fn conflict_set_identity_is_order_independent() {
        let run = |first_wins: bool| {
            let engine = engine();
            create_note(&engine, "a", "base");
            let tx1 = engine.begin_with(&tester(), TxMode::Base);
            let tx2 = engine.begin_with(&tester(), TxMode::Base);
            tx1.read(&nom("a"))
                .unwrap()
                .set("text", DocumentValue::text("one"))
                .unwrap();
            tx2.read(&nom("a"))
                .unwrap()
                .set("text", DocumentValue::text("two"))
                .unwrap();
            if first_wins {
                tx1.try_commit();
                tx2.try_commit();
            } else {
                tx2.try_commit();
                tx1.try_commit();
            }
            let head = engine.store().head(&nom("a")).unwrap();
            let record = engine.store().get_record(&head).unwrap();
            parse_conflict_payload(record.payload()).unwrap()
        };
        // member list is canonical regardless of commit order
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn nested_conflicts_flatten() {
        let engine = engine();
        create_note(&engine, "a", "base");
        let tx1 = engine.begin_with(&tester(), TxMode::Base);
        let tx2 = engine.begin_with(&tester(), TxMode::Base);
        let tx3 = engine.begin_with(&tester(), TxMode::Base);
        for (tx, text) in [(&tx1, "one"), (&tx2, "two"), (&tx3, "three")] {
            tx.read(&nom("a"))
                .unwrap()
                .set("text", DocumentValue::text(text))
                .unwrap();
        }
        tx1.try_commit();
        tx2.try_commit();
        let third = tx3.try_commit();
        assert!(third.is_committed());

        let head = engine.store().head(&nom("a")).unwrap();
        let members = parse_conflict_payload(
            engine.store().get_record(&head).unwrap().payload(),
        )
        .unwrap();
        // versions: 2 (winner), 3 (loser), 5 (second loser); 4 was the
        // first conflict set and is flattened away
        assert_eq!(
            members,
            vec![
                nom("a").versioned(2),
                nom("a").versioned(3),
                nom("a").versioned(5)
            ]
        );
    }

    #[test]
    fn conflicts_resolve_by_adoption() {
        let engine = engine();
        create_note(&engine, "a", "base");
        let tx1 = engine.begin_with(&tester(), TxMode::Base);
        let tx2 = engine.begin_with(&tester(), TxMode::Base);
        tx1.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("one"))
            .unwrap();
        tx2.read(&nom("a"))
            .unwrap()
            .set("text", DocumentValue::text("two"))
            .unwrap();
        tx1.try_commit();
        tx2.try_commit();

        let outcome = engine.in_transaction(&tester(), |tx| {
            let members = tx.read_conflict(&nom("a"))?;
            assert_eq!(members.len(), 2);
            let adopted = tx.adopt_version(&members[1])?;
            assert_eq!(adopted.get("text")?, DocumentValue::text("two"));
            tx.commit()
        });
        assert!(outcome.is_committed(), "{outcome:?}");
        assert_eq!(outcome.written, vec![nom("a").versioned(5)]);

        // conflict cleared; normal reads resume
        let read = engine.in_transaction(&tester(), |tx| {
            assert_eq!(
                tx.read(&nom("a"))?.get("text")?,
                DocumentValue::text("two")
            );
            tx.commit()
        });
        assert!(read.is_committed());
        // nothing was lost: 5 records exist, though the losing write sits
        // off the head chain (reachable through the conflict-set payload)
        assert_eq!(engine.store().record_count(), 5);
        let chain: Vec<Version> = engine
            .store()
            .history(&nom("a"))
            .unwrap()
            .iter()
            .map(|r| r.id().version())
            .collect();
        assert_eq!(chain, vec![5, 4, 2, 1]);
        assert!(engine.store().contains(&nom("a").versioned(3)));
    }

    #[test]
    fn read_conflict_on_clean_head_is_an_error() {
        let engine = engine();
        create_note(&engine, "a", "clean");
        let outcome = engine.in_transaction(&tester(), |tx| {
            tx.read_conflict(&nom("a"))?;
            tx.commit()
        });
        assert!(matches!(outcome.error, Some(EngineError::NotAConflict(_))));
    }

    #[test]
    fn commit_rejects_type_and_domain_violations() {
        let engine = engine();
        let bad_type = engine.in_transaction(&tester(), |tx| {
            let note = tx.create("Note", nom("a"))?;
            note.set("count", DocumentValue::text("not a number"))?;
            tx.commit()
        });
        assert_eq!(bad_type.status, TxStatus::Aborted);
        match bad_type.error {
            Some(EngineError::IntegrityRejected(problems)) => {
                assert!(problems[0].contains("Note.count"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(engine.store().record_count(), 0);

        let bad_domain = engine.in_transaction(&tester(), |tx| {
            let b = tx.create("Bounded", nom("b"))?;
            b.set("n", DocumentValue::Integer(500))?;
            tx.commit()
        });
        match bad_domain.error {
            Some(EngineError::IntegrityRejected(problems)) => {
                assert!(problems[0].contains("n below 100"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(engine.store().record_count(), 0);
    }

    #[test]
    fn same_transaction_shares_ids_and_new_ones_increase() {
        let engine = engine();
        let outcome = engine.in_transaction(&tester(), |tx| {
            tx.create("Note", nom("a"))?;
            tx.create("Note", nom("b"))?;
            tx.commit()
        });
        let txn_a = engine
            .origin_of(&nom("a").versioned(1))
            .unwrap()
            .transaction_id;
        let txn_b = engine
            .origin_of(&nom("b").versioned(1))
            .unwrap()
            .transaction_id;
        assert_eq!(txn_a, txn_b);
        assert_eq!(Some(txn_a), outcome.transaction_id);

        create_note(&engine, "c", "later");
        let txn_c = engine
            .origin_of(&nom("c").versioned(1))
            .unwrap()
            .transaction_id;
        assert!(txn_c > txn_a);
    }

    #[test]
    fn reads_are_lazy_and_cached() {
        let engine = engine();
        create_note(&engine, "a", "x");
        create_note(&engine, "b", "y");
        let fetches_before = engine.store().fetch_count();
        let outcome = engine.in_transaction(&tester(), |tx| {
            let first = tx.read(&nom("a"))?;
            let again = tx.read(&nom("a"))?; // served from the handle cache
            first.set("text", DocumentValue::text("z"))?;
            assert_eq!(again.get("text")?, DocumentValue::text("z"));
            tx.commit()
        });
        assert!(outcome.is_committed());
        // only "a" was fetched, exactly once; "b" was never touched
        assert_eq!(engine.store().fetch_count() - fetches_before, 1);
    }

    #[test]
    fn create_rejects_existing_nominatives() {
        let engine = engine();
        create_note(&engine, "a", "x");
        let outcome = engine.in_transaction(&tester(), |tx| {
            tx.create("Note", nom("a"))?;
            tx.commit()
        });
        assert!(matches!(
            outcome.error,
            Some(EngineError::AlreadyExists(_))
        ));
        let twice = engine.in_transaction(&tester(), |tx| {
            tx.create("Note", nom("fresh"))?;
            tx.create("Note", nom("fresh"))?;
            tx.commit()
        });
        assert!(matches!(twice.error, Some(EngineError::AlreadyExists(_))));
    }

    #[test]
    fn add_to_set_deduplicates() {
        let engine = engine();
        let outcome = engine.in_transaction(&tester(), |tx| {
            let note = tx.create("Note", nom("a"))?;
            assert!(note.add_to_set("tags", DocumentValue::text("red"))?);
            assert!(!note.add_to_set("tags", DocumentValue::text("red"))?);
            assert!(note.add_to_set("tags", DocumentValue::text("blue"))?);
            tx.commit()
        });
        assert!(outcome.is_committed());
        let record = engine.store().get_record(&nom("a").versioned(1)).unwrap();
        let (_, slots) = parse_entity_payload(record.payload()).unwrap();
        assert_eq!(slots["tags"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn references_resolve_to_exact_versions() {
        let engine = engine();
        create_note(&engine, "a", "first");
        // link b -> a@1, then move a ahead
        let outcome = engine.in_transaction(&tester(), |tx| {
            let a = tx.read(&nom("a"))?;
            let b = tx.create("Note", nom("b"))?;
            b.set("next", a.reference())?;
            tx.commit()
        });
        assert!(outcome.is_committed());
        engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?.set("text", DocumentValue::text("second"))?;
            tx.commit()
        });

        let outcome = engine.in_transaction(&tester(), |tx| {
            let b = tx.read(&nom("b"))?;
            let reference = b.get("next")?;
            let id = reference.as_reference().unwrap().clone();
            assert_eq!(id, nom("a").versioned(1));
            let a = tx.resolve(&id)?;
            // the exact referenced version, not the newer head
            assert_eq!(a.get("text")?, DocumentValue::text("first"));
            tx.commit()
        });
        assert!(outcome.is_committed());
    }

    #[test]
    fn handles_created_in_transaction_reference_version_one() {
        let engine = engine();
        let outcome = engine.in_transaction(&tester(), |tx| {
            let a = tx.create("Note", nom("a"))?;
            let b = tx.create("Note", nom("b"))?;
            a.set("next", b.reference())?;
            tx.commit()
        });
        assert!(outcome.is_committed());
        let record = engine.store().get_record(&nom("a").versioned(1)).unwrap();
        let (_, slots) = parse_entity_payload(record.payload()).unwrap();
        assert_eq!(
            slots["next"],
            DocumentValue::Reference(nom("b").versioned(1))
        );
    }

    #[test]
    fn context_is_unusable_after_finishing() {
        let engine = engine();
        create_note(&engine, "a", "x");
        let tx = engine.begin(&tester());
        let handle = tx.read(&nom("a")).unwrap();
        assert!(tx.try_commit().is_committed()); // clean commit, nothing dirty
        assert!(matches!(
            tx.read(&nom("a")),
            Err(EngineError::InactiveContext)
        ));
        assert!(matches!(
            handle.set("text", DocumentValue::text("no")),
            Err(EngineError::InactiveContext)
        ));
        let again = tx.try_commit();
        assert!(matches!(again.error, Some(EngineError::InactiveContext)));
    }

    #[test]
    fn empty_commit_writes_nothing() {
        let engine = engine();
        create_note(&engine, "a", "x");
        let before = engine.store().record_count();
        let outcome = engine.in_transaction(&tester(), |tx| {
            tx.read(&nom("a"))?;
            tx.commit()
        });
        assert!(outcome.is_committed());
        assert!(outcome.written.is_empty());
        assert_eq!(outcome.transaction_id, None);
        assert_eq!(engine.store().record_count(), before);
    }

    #[test]
    fn get_or_create_role_is_idempotent() {
        let engine = engine();
        let su = tester();
        let first = engine
            .get_or_create_role(&su, "Note", &nom("roles/alice"))
            .unwrap();
        let second = engine
            .get_or_create_role(&su, "Note", &nom("roles/alice"))
            .unwrap();
        assert_eq!(first, second);
        assert_eq!(first.role_id(), "roles/alice");
        assert_eq!(first.backing(), Some(&nom("roles/alice").versioned(1)));
        assert_eq!(engine.store().history(&nom("roles/alice")).unwrap().len(), 1);

        // a non-role schema cannot act
        let err = engine
            .get_or_create_role(&su, "Bounded", &nom("roles/bob"))
            .unwrap_err();
        assert!(matches!(err, EngineError::Schema(SchemaError::NotARole(_))));
    }

    #[test]
    fn origin_of_and_slot_originator_trace_writers() {
        let engine = engine();
        let su = tester();
        let alice = engine
            .get_or_create_role(&su, "Note", &nom("alice"))
            .unwrap();
        create_note(&engine, "doc", "draft");
        let outcome = engine.in_transaction(&alice, |tx| {
            tx.read(&nom("doc"))?.set("count", DocumentValue::Integer(9))?;
            tx.commit()
        });
        assert!(outcome.is_committed());

        assert_eq!(engine.origin_of(&nom("doc").versioned(1)).unwrap().role, "super-user");
        assert_eq!(engine.origin_of(&nom("doc").versioned(2)).unwrap().role, "alice");
        // "count" last changed in version 2 (by alice); "text" in version 1
        assert_eq!(engine.slot_originator(&nom("doc"), "count").unwrap().role, "alice");
        assert_eq!(
            engine.slot_originator(&nom("doc"), "text").unwrap().role,
            "super-user"
        );
    }

    #[test]
    fn created_entity_conflicts_with_concurrent_creator() {
        let engine = engine();
        let tx1 = engine.begin(&tester());
        let tx2 = engine.begin(&tester());
        tx1.create("Note", nom("fresh")).unwrap();
        tx2.create("Note", nom("fresh")).unwrap();
        assert!(tx1.try_commit().is_committed());
        let second = tx2.try_commit();
        assert_eq!(second.status, TxStatus::Conflicted);
        assert_eq!(engine.store().history(&nom("fresh")).unwrap().len(), 1);
    }
}

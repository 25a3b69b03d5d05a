//! Integrity verification, revocation, and revalidation cascades.
//!
//! Verification answers "is this store still sound" on three levels, checked
//! in order per head record: bit level (the stored hash still matches the
//! content), structural (the payload is shaped the way its schema says), and
//! domain (the schema's constraints hold). A record failing one level is not
//! also reported at the levels below it, so a single injected fault shows up
//! as a single violation.
//!
//! Revocation never deletes: it appends a new version whose payload copies
//! the revoked one but whose status is invalid, with the reason recorded.
//! Because other objects may reference the revoked one, a revocation can
//! cascade: every transitive dependent is revisited exactly once (in
//! dependency order when the graph is acyclic) and either repaired, by
//! re-pointing references to the dependee's newest valid version and
//! recommitting through a normal transaction, or invalidated in turn. On
//! cyclic graphs the cascade falls back to bounded breadth-first rounds that
//! stop at quiescence or after `max_rounds`, reporting cycle members that
//! remain invalid as unresolved.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::codec::{collect_references, DocumentValue};
use crate::engine::{EngineError, SmartStore, TxMode, TxStatus};
use crate::ids::{NominativeId, Version, VersionedId};
use crate::schema::{
    parse_conflict_payload, parse_entity_payload, ConcreteRole, StoreView,
};
use crate::store::{RecordStatus, Store, StoredRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCategory {
    /// Payload shape disagrees with the schema (missing or extra slots,
    /// wrong value types, bad references).
    Structural,
    /// A domain constraint failed or crashed.
    Domain,
    /// Stored bytes no longer match their hash, or the log was damaged.
    BitLevel,
}

#[derive(Debug, Clone)]
pub struct IntegrityViolation {
    /// The offending head record, or `None` for store-wide damage.
    pub id: Option<VersionedId>,
    pub category: ViolationCategory,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct IntegrityReport {
    /// How many head records were examined.
    pub checked: usize,
    pub violations: Vec<IntegrityViolation>,
}

impl IntegrityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RevocationError {
    #[error("record {0} not found")]
    NotFound(VersionedId),
    #[error("record {0} is already invalid")]
    AlreadyInvalid(VersionedId),
    #[error("cascade strategy {0:?} is not implemented")]
    UnsupportedStrategy(String),
    #[error("max rounds must be at least 1")]
    InvalidMaxRounds,
    #[error("cascade lost repeated commit races on {0}")]
    Contended(NominativeId),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// How a cascade walks the dependency graph. Only `Lazy` is implemented;
/// the other named strategies are recognized but rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeStrategy {
    /// Topological on acyclic graphs; bounded breadth-first rounds when
    /// the affected subgraph has cycles.
    Lazy,
    EnsureSteadyState,
    ForceState,
}

impl CascadeStrategy {
    pub fn parse(text: &str) -> Option<CascadeStrategy> {
        match text {
            "lazy" => Some(CascadeStrategy::Lazy),
            "ensure-steady-state" => Some(CascadeStrategy::EnsureSteadyState),
            "force-state" => Some(CascadeStrategy::ForceState),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            CascadeStrategy::Lazy => "lazy",
            CascadeStrategy::EnsureSteadyState => "ensure-steady-state",
            CascadeStrategy::ForceState => "force-state",
        }
    }
}

#[derive(Debug)]
pub struct RevalidationOutcome {
    /// Every node visit in processing order; a node can appear twice when
    /// cyclic rounds revisit it.
    pub order: Vec<NominativeId>,
    /// Nodes recommitted with a new valid head.
    pub repaired: BTreeSet<NominativeId>,
    /// Nodes given a new invalid head because repair was impossible.
    pub invalidated: BTreeSet<NominativeId>,
    /// Cycle members still invalid when the cascade stopped.
    pub unresolved: BTreeSet<NominativeId>,
    pub rounds_used: usize,
    pub cyclic: bool,
}

/// Head-reference graph: which objects' heads point at which others.
pub struct DependencyGraph {
    dependents: BTreeMap<NominativeId, BTreeSet<NominativeId>>,
}

impl DependencyGraph {
    /// Builds the graph by scanning every head payload. Deliberately
    /// independent of the store's incremental index so the two can be
    /// cross-checked.
    pub fn from_store(store: &Store) -> DependencyGraph {
        let mut dependents: BTreeMap<NominativeId, BTreeSet<NominativeId>> = BTreeMap::new();
        for (nominative, version) in store.heads_snapshot() {
            let Ok(record) = store.get_record(&nominative.versioned(version)) else {
                continue;
            };
            for reference in collect_references(record.payload()) {
                if reference.nominative() != &nominative {
                    dependents
                        .entry(reference.nominative().clone())
                        .or_default()
                        .insert(nominative.clone());
                }
            }
        }
        DependencyGraph { dependents }
    }

    pub fn dependents(&self, nominative: &NominativeId) -> BTreeSet<NominativeId> {
        self.dependents
            .get(nominative)
            .cloned()
            .unwrap_or_default()
    }

    /// Seeds plus everything transitively depending on them.
    pub fn affected_from(&self, seeds: &BTreeSet<NominativeId>) -> BTreeSet<NominativeId> {
        let mut seen: BTreeSet<NominativeId> = seeds.clone();
        let mut queue: VecDeque<NominativeId> = seeds.iter().cloned().collect();
        while let Some(node) = queue.pop_front() {
            for dependent in self.dependents(&node) {
                if seen.insert(dependent.clone()) {
                    queue.push_back(dependent);
                }
            }
        }
        seen
    }

    /// Orders `subset` so every node comes after all its dependees, or
    /// returns the members of a cycle.
    pub fn topo_dependees_first(
        &self,
        subset: &BTreeSet<NominativeId>,
    ) -> Result<Vec<NominativeId>, BTreeSet<NominativeId>> {
        let mut indegree: BTreeMap<NominativeId, usize> =
            subset.iter().map(|n| (n.clone(), 0)).collect();
        for node in subset {
            for dependent in self.dependents(node) {
                if let Some(d) = indegree.get_mut(&dependent) {
                    *d += 1;
                }
            }
        }
        let mut ready: VecDeque<NominativeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| n.clone())
            .collect();
        let mut order = Vec::with_capacity(subset.len());
        while let Some(node) = ready.pop_front() {
            for dependent in self.dependents(&node) {
                if let Some(d) = indegree.get_mut(&dependent) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push_back(dependent);
                    }
                }
            }
            order.push(node);
        }
        if order.len() == subset.len() {
            Ok(order)
        } else {
            let ordered: BTreeSet<NominativeId> = order.into_iter().collect();
            Err(subset.difference(&ordered).cloned().collect())
        }
    }
}

struct LiveStoreView<'a> {
    store: &'a Store,
}

impl StoreView for LiveStoreView<'_> {
    fn head_version(&self, nominative: &NominativeId) -> Option<Version> {
        self.store.head_version(nominative)
    }

    fn get_record(&self, id: &VersionedId) -> Option<std::sync::Arc<StoredRecord>> {
        self.store.get_record(id).ok()
    }
}

enum NodeAction {
    Repaired,
    Invalidated,
    NoChange,
}

impl SmartStore {
    /// Checks every head record (or just those in `subset`). For the whole
    /// store, log corruption found at open time is reported as one
    /// bit-level violation.
    pub fn verify_integrity(&self, subset: Option<&BTreeSet<NominativeId>>) -> IntegrityReport {
        let store = self.store();
        let view = LiveStoreView { store };
        let view_ref: &dyn StoreView = &view;
        let mut violations = Vec::new();
        let mut checked = 0;
        for (nominative, version) in store.heads_snapshot() {
            if let Some(subset) = subset {
                if !subset.contains(&nominative) {
                    continue;
                }
            }
            checked += 1;
            let id = nominative.versioned(version);
            let record = match store.get_record(&id) {
                Ok(r) => r,
                Err(_) => {
                    violations.push(IntegrityViolation {
                        id: Some(id),
                        category: ViolationCategory::BitLevel,
                        detail: "head record is missing".to_string(),
                    });
                    continue;
                }
            };
            if !record.verify_hash() {
                violations.push(IntegrityViolation {
                    id: Some(id),
                    category: ViolationCategory::BitLevel,
                    detail: "content does not match its hash".to_string(),
                });
                continue;
            }
            if let Some(members) = parse_conflict_payload(record.payload()) {
                // a conflict set is a legitimate head awaiting resolution;
                // only its own shape is checked
                for member in members {
                    if store.get_record(&member).is_err() {
                        violations.push(IntegrityViolation {
                            id: Some(id.clone()),
                            category: ViolationCategory::Structural,
                            detail: format!("conflict set names missing record {member}"),
                        });
                    }
                }
                continue;
            }
            if !record.status().is_valid() {
                // an invalidated head is already marked as non-knowledge;
                // only its bytes are attested
                continue;
            }
            let Some((schema, slots)) = parse_entity_payload(record.payload()) else {
                violations.push(IntegrityViolation {
                    id: Some(id),
                    category: ViolationCategory::Structural,
                    detail: "payload is neither an entity nor a conflict set".to_string(),
                });
                continue;
            };
            let structural = match self.registry().typecheck_collect(schema, slots, Some(view_ref))
            {
                Ok(problems) => problems,
                Err(e) => vec![e.to_string()],
            };
            if !structural.is_empty() {
                violations.extend(structural.into_iter().map(|detail| IntegrityViolation {
                    id: Some(id.clone()),
                    category: ViolationCategory::Structural,
                    detail,
                }));
                continue;
            }
            match self
                .registry()
                .check_domain_constraints(schema, slots, view_ref)
            {
                Ok(issues) => {
                    violations.extend(issues.into_iter().map(|issue| IntegrityViolation {
                        id: Some(id.clone()),
                        category: ViolationCategory::Domain,
                        detail: if issue.crashed {
                            format!("constraint {:?} crashed", issue.constraint)
                        } else {
                            format!("constraint {:?} failed", issue.constraint)
                        },
                    }));
                }
                Err(e) => violations.push(IntegrityViolation {
                    id: Some(id.clone()),
                    category: ViolationCategory::Domain,
                    detail: e.to_string(),
                }),
            }
        }
        if subset.is_none() {
            if let Some(report) = store.corruption() {
                violations.push(IntegrityViolation {
                    id: None,
                    category: ViolationCategory::BitLevel,
                    detail: format!(
                        "log corruption at offset {}: {} ({} records recovered)",
                        report.offset, report.detail, report.records_recovered
                    ),
                });
            }
        }
        IntegrityReport {
            checked,
            violations,
        }
    }

    /// Objects whose current head references `nominative`, from the
    /// store's incremental index.
    pub fn dependents_of(&self, nominative: &NominativeId) -> BTreeSet<NominativeId> {
        self.store().dependents_of(nominative)
    }

    /// Withdraws a record: appends a new head version copying its payload
    /// with an invalid status naming the reason. The revoked data remains
    /// readable; it is just no longer current knowledge.
    pub fn revoke(
        &self,
        role: &ConcreteRole,
        id: &VersionedId,
        reason: &str,
    ) -> Result<VersionedId, RevocationError> {
        let record = self
            .store()
            .get_record(id)
            .map_err(|_| RevocationError::NotFound(id.clone()))?;
        if !record.status().is_valid() {
            return Err(RevocationError::AlreadyInvalid(id.clone()));
        }
        let appended = self.raw_append(
            role,
            id.nominative(),
            record.payload().clone(),
            RecordStatus::invalid(reason),
        )?;
        Ok(appended)
    }

    /// Revisits everything transitively depending on `seeds` and repairs
    /// or invalidates each dependent. Seeds themselves are never repaired:
    /// their revocation is authoritative.
    pub fn cascade_revalidate(
        &self,
        role: &ConcreteRole,
        seeds: &[NominativeId],
        strategy: CascadeStrategy,
        max_rounds: usize,
    ) -> Result<RevalidationOutcome, RevocationError> {
        if strategy != CascadeStrategy::Lazy {
            return Err(RevocationError::UnsupportedStrategy(
                strategy.name().to_string(),
            ));
        }
        if max_rounds == 0 {
            return Err(RevocationError::InvalidMaxRounds);
        }
        let seed_set: BTreeSet<NominativeId> = seeds.iter().cloned().collect();
        for seed in &seed_set {
            if self.store().head_version(seed).is_none() {
                return Err(EngineError::NotFound(seed.clone()).into());
            }
        }
        let graph = DependencyGraph::from_store(self.store());
        let affected = graph.affected_from(&seed_set);

        let mut outcome = RevalidationOutcome {
            order: Vec::new(),
            repaired: BTreeSet::new(),
            invalidated: BTreeSet::new(),
            unresolved: BTreeSet::new(),
            rounds_used: 0,
            cyclic: false,
        };

        match graph.topo_dependees_first(&affected) {
            Ok(order) => {
                outcome.rounds_used = 1;
                for node in order {
                    outcome.order.push(node.clone());
                    if seed_set.contains(&node) {
                        continue;
                    }
                    match self.process_node(role, &node, &affected)? {
                        NodeAction::Repaired => {
                            outcome.repaired.insert(node);
                        }
                        NodeAction::Invalidated => {
                            outcome.invalidated.insert(node);
                        }
                        NodeAction::NoChange => {}
                    }
                }
            }
            Err(cycle_nodes) => {
                outcome.cyclic = true;
                outcome.order.extend(seed_set.iter().cloned());
                let mut frontier = seed_set.clone();
                loop {
                    let next: BTreeSet<NominativeId> = frontier
                        .iter()
                        .flat_map(|n| graph.dependents(n))
                        .filter(|n| affected.contains(n))
                        .collect();
                    if next.is_empty() || outcome.rounds_used == max_rounds {
                        break;
                    }
                    outcome.rounds_used += 1;
                    let mut changed = BTreeSet::new();
                    for node in next {
                        outcome.order.push(node.clone());
                        if seed_set.contains(&node) {
                            continue;
                        }
                        match self.process_node(role, &node, &affected)? {
                            NodeAction::Repaired => {
                                outcome.repaired.insert(node.clone());
                                changed.insert(node);
                            }
                            NodeAction::Invalidated => {
                                outcome.invalidated.insert(node.clone());
                                changed.insert(node);
                            }
                            NodeAction::NoChange => {}
                        }
                    }
                    if changed.is_empty() {
                        break;
                    }
                    frontier = changed;
                }
                for node in &cycle_nodes {
                    let invalid_head = self
                        .store()
                        .head(node)
                        .and_then(|id| self.store().get_record(&id).ok())
                        .map(|r| !r.status().is_valid())
                        .unwrap_or(false);
                    if invalid_head {
                        outcome.unresolved.insert(node.clone());
                    }
                }
            }
        }
        Ok(outcome)
    }

    /// Repair-or-invalidate one dependent: re-point its references to each
    /// affected dependee's newest valid version and recommit through a
    /// normal transaction (so type and domain gates apply). If no valid
    /// target exists or the commit is rejected, append an invalid head
    /// instead.
    fn process_node(
        &self,
        role: &ConcreteRole,
        node: &NominativeId,
        affected: &BTreeSet<NominativeId>,
    ) -> Result<NodeAction, RevocationError> {
        let head = self
            .store()
            .head(node)
            .ok_or_else(|| EngineError::NotFound(node.clone()))?;
        let record = self.store().get_record(&head).map_err(EngineError::from)?;
        if parse_conflict_payload(record.payload()).is_some() {
            // conflicted heads are for explicit resolution, not cascades
            return Ok(NodeAction::NoChange);
        }
        let Some((_, slots)) = parse_entity_payload(record.payload()) else {
            return Ok(NodeAction::NoChange);
        };

        let mut blocked = false;
        let mut repaired_slots: BTreeMap<String, DocumentValue> = BTreeMap::new();
        for (name, value) in slots {
            repaired_slots.insert(
                name.clone(),
                self.repoint_references(value, affected, &mut blocked),
            );
        }

        if !blocked {
            for _ in 0..3 {
                let outcome = self.in_transaction_with(role, TxMode::Acid, |tx| {
                    let handle = tx.read(node)?;
                    // write every slot so the revalidation always commits a
                    // fresh head version, even when values are unchanged
                    for (name, value) in &repaired_slots {
                        handle.set(name, value.clone())?;
                    }
                    tx.commit()
                });
                match outcome.status {
                    TxStatus::Committed => return Ok(NodeAction::Repaired),
                    TxStatus::Conflicted => continue,
                    TxStatus::Aborted => match outcome.error {
                        Some(EngineError::IntegrityRejected(_)) => {
                            blocked = true;
                            break;
                        }
                        Some(e) => return Err(e.into()),
                        None => return Err(RevocationError::Contended(node.clone())),
                    },
                }
            }
            if !blocked {
                return Err(RevocationError::Contended(node.clone()));
            }
        }

        // repair impossible: invalidate, unless the head already is
        if !record.status().is_valid() {
            return Ok(NodeAction::NoChange);
        }
        self.raw_append(
            role,
            node,
            record.payload().clone(),
            RecordStatus::invalid("depends on revoked data"),
        )?;
        Ok(NodeAction::Invalidated)
    }

    /// Rewrites references to affected dependees so they target the
    /// dependee's newest valid version. Sets `blocked` if some referenced
    /// object has no valid version left.
    fn repoint_references(
        &self,
        value: &DocumentValue,
        affected: &BTreeSet<NominativeId>,
        blocked: &mut bool,
    ) -> DocumentValue {
        match value {
            DocumentValue::Reference(id) if affected.contains(id.nominative()) => {
                match self.latest_valid_version(id.nominative()) {
                    Some(version) => DocumentValue::Reference(id.nominative().versioned(version)),
                    None => {
                        *blocked = true;
                        value.clone()
                    }
                }
            }
            DocumentValue::Array(items) => DocumentValue::Array(
                items
                    .iter()
                    .map(|item| self.repoint_references(item, affected, blocked))
                    .collect(),
            ),
            DocumentValue::Map(map) => DocumentValue::Map(
                map.iter()
                    .map(|(k, v)| (k.clone(), self.repoint_references(v, affected, blocked)))
                    .collect(),
            ),
            other => other.clone(),
        }
    }

    /// Newest version of `nominative` that is a valid entity record.
    pub fn latest_valid_version(&self, nominative: &NominativeId) -> Option<Version> {
        let history = self.store().history(nominative).ok()?;
        history
            .iter()
            .find(|r| r.status().is_valid() && parse_entity_payload(r.payload()).is_some())
            .map(|r| r.id().version())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::schema::{AtomicType, EntitySchema, SchemaRegistry};
    use crate::store::BackendConfig;
    use std::sync::Arc;

    fn nom(name: &str) -> NominativeId {
        NominativeId::parse(name).unwrap()
    }

    fn su() -> ConcreteRole {
        ConcreteRole::super_user()
    }

    fn node_registry(require_valid_link: bool) -> SchemaRegistry {
        let registry = SchemaRegistry::new();
        let mut builder = EntitySchema::builder("Node")
            .slot("label", AtomicType::Text)
            .slot("link", AtomicType::ref_to("Node"))
            .slot("links", AtomicType::set_of(AtomicType::ref_to("Node")));
        if require_valid_link {
            builder = builder.constraint("linked heads are valid", |slots, view| {
                let mut targets = Vec::new();
                if let Some(id) = slots["link"].as_reference() {
                    targets.push(id.clone());
                }
                if let Some(items) = slots["links"].as_array() {
                    targets.extend(items.iter().filter_map(|i| i.as_reference().cloned()));
                }
                targets.iter().all(|id| {
                    view.head_version(id.nominative())
                        .and_then(|v| view.get_record(&id.nominative().versioned(v)))
                        .map(|r| r.status().is_valid())
                        .unwrap_or(false)
                })
            });
        }
        registry.register(builder.build()).unwrap();
        registry
    }

    fn engine_with(require_valid_link: bool) -> SmartStore {
        SmartStore::open(&BackendConfig::Memory, node_registry(require_valid_link))
            .unwrap()
            .with_clock(Arc::new(VirtualClock::new(50)))
    }

    fn create_node(engine: &SmartStore, name: &str) {
        let outcome = engine.in_transaction(&su(), |tx| {
            let n = tx.create("Node", nom(name))?;
            n.set("label", DocumentValue::text(name))?;
            tx.commit()
        });
        assert!(outcome.is_committed(), "{outcome:?}");
    }

    fn link(engine: &SmartStore, from: &str, to: &str) {
        let outcome = engine.in_transaction(&su(), |tx| {
            let target = tx.read(&nom(to))?;
            tx.read(&nom(from))?.set("link", target.reference())?;
            tx.commit()
        });
        assert!(outcome.is_committed(), "{outcome:?}");
    }

    #[test]
    fn clean_store_verifies() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        create_node(&engine, "b");
        link(&engine, "b", "a");
        let report = engine.verify_integrity(None);
        assert!(report.passed());
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn empty_subset_checks_nothing() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        let report = engine.verify_integrity(Some(&BTreeSet::new()));
        assert!(report.passed());
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn schema_evolution_surfaces_structural_violations() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        // the same store seen through a schema whose "label" became integer
        let stricter = SchemaRegistry::new();
        stricter
            .register(
                EntitySchema::builder("Node")
                    .slot("label", AtomicType::Integer)
                    .slot("link", AtomicType::ref_to("Node"))
                    .slot("links", AtomicType::set_of(AtomicType::ref_to("Node")))
                    .build(),
            )
            .unwrap();
        let report = engine.with_registry(stricter).verify_integrity(None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].category, ViolationCategory::Structural);
        assert_eq!(report.violations[0].id, Some(nom("a").versioned(1)));
    }

    #[test]
    fn new_domain_constraints_surface_domain_violations() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        let stricter = SchemaRegistry::new();
        stricter
            .register(
                EntitySchema::builder("Node")
                    .slot("label", AtomicType::Text)
                    .slot("link", AtomicType::ref_to("Node"))
                    .slot("links", AtomicType::set_of(AtomicType::ref_to("Node")))
                    .constraint("labels are long", |slots, _| {
                        slots["label"].as_text().unwrap().len() > 10
                    })
                    .build(),
            )
            .unwrap();
        let report = engine.with_registry(stricter).verify_integrity(None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].category, ViolationCategory::Domain);
        assert!(report.violations[0].detail.contains("labels are long"));
    }

    #[test]
    fn crashing_predicate_counts_as_domain_violation() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        let touchy = SchemaRegistry::new();
        touchy
            .register(
                EntitySchema::builder("Node")
                    .slot("label", AtomicType::Text)
                    .slot("link", AtomicType::ref_to("Node"))
                    .slot("links", AtomicType::set_of(AtomicType::ref_to("Node")))
                    .constraint("explodes", |_, _| panic!("bad predicate"))
                    .build(),
            )
            .unwrap();
        let hook = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let report = engine.with_registry(touchy).verify_integrity(None);
        std::panic::set_hook(hook);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].category, ViolationCategory::Domain);
        assert!(report.violations[0].detail.contains("crashed"));
    }

    #[test]
    fn log_corruption_is_one_bit_level_violation() {
        let dir = tempfile::tempdir().unwrap();
        let config = BackendConfig::File(dir.path().join("store.log"));
        {
            let engine = SmartStore::open(&config, node_registry(false)).unwrap();
            create_node(&engine, "a");
            create_node(&engine, "b");
        }
        let path = dir.path().join("store.log");
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x04;
        std::fs::write(&path, &bytes).unwrap();

        let engine = SmartStore::open(&config, node_registry(false)).unwrap();
        let report = engine.verify_integrity(None);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].category, ViolationCategory::BitLevel);
        assert!(report.violations[0].id.is_none());
        assert!(report.violations[0].detail.contains("offset"));

        // subset verification scopes out store-wide damage
        let subset = BTreeSet::from([nom("a")]);
        assert!(engine.verify_integrity(Some(&subset)).passed());
    }

    #[test]
    fn dependency_index_matches_full_scan() {
        let engine = engine_with(false);
        for name in ["a", "b", "c", "d"] {
            create_node(&engine, name);
        }
        link(&engine, "b", "a");
        link(&engine, "c", "a");
        link(&engine, "d", "c");
        link(&engine, "c", "b"); // re-link: c now points at b, not a

        let graph = DependencyGraph::from_store(engine.store());
        for name in ["a", "b", "c", "d"] {
            assert_eq!(
                engine.dependents_of(&nom(name)),
                graph.dependents(&nom(name)),
                "index and scan disagree on {name}"
            );
        }
        assert_eq!(engine.dependents_of(&nom("a")), BTreeSet::from([nom("b")]));
        assert_eq!(engine.dependents_of(&nom("b")), BTreeSet::from([nom("c")]));
        assert_eq!(engine.dependents_of(&nom("c")), BTreeSet::from([nom("d")]));
    }

    #[test]
    fn revoke_appends_an_invalid_copy() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        let revoked = engine
            .revoke(&su(), &nom("a").versioned(1), "entered in error")
            .unwrap();
        assert_eq!(revoked, nom("a").versioned(2));

        let head = engine.store().get_record(&revoked).unwrap();
        assert_eq!(
            head.status(),
            &RecordStatus::invalid("entered in error")
        );
        // payload is a copy of the revoked version
        assert_eq!(
            head.payload(),
            engine
                .store()
                .get_record(&nom("a").versioned(1))
                .unwrap()
                .payload()
        );
        assert_eq!(head.previous(), Some(&nom("a").versioned(1)));

        // the history keeps both; verification still passes
        assert_eq!(engine.store().history(&nom("a")).unwrap().len(), 2);
        assert!(engine.verify_integrity(None).passed());

        let again = engine.revoke(&su(), &revoked, "twice");
        assert!(matches!(again, Err(RevocationError::AlreadyInvalid(_))));
        let missing = engine.revoke(&su(), &nom("zz").versioned(1), "x");
        assert!(matches!(missing, Err(RevocationError::NotFound(_))));
    }

    #[test]
    fn dag_cascade_repairs_in_topological_order() {
        let engine = engine_with(false);
        for name in ["a", "b", "c"] {
            create_node(&engine, name);
        }
        link(&engine, "b", "a"); // b@2 -> a@1
        link(&engine, "c", "b"); // c@2 -> b@2

        engine.revoke(&su(), &nom("a").versioned(1), "recalled").unwrap();
        let outcome = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 5)
            .unwrap();

        assert!(!outcome.cyclic);
        assert_eq!(outcome.order, vec![nom("a"), nom("b"), nom("c")]);
        assert_eq!(outcome.repaired, BTreeSet::from([nom("b"), nom("c")]));
        assert!(outcome.invalidated.is_empty());
        assert!(outcome.unresolved.is_empty());
        assert_eq!(outcome.rounds_used, 1);

        // each dependent touched exactly once: one new version apiece
        assert_eq!(engine.store().history(&nom("b")).unwrap().len(), 3);
        assert_eq!(engine.store().history(&nom("c")).unwrap().len(), 3);

        // b still points at a@1 (a's newest valid version); c re-pointed
        // to b's repaired head
        let b_head = engine.store().get_record(&nom("b").versioned(3)).unwrap();
        let (_, b_slots) = parse_entity_payload(b_head.payload()).unwrap();
        assert_eq!(
            b_slots["link"],
            DocumentValue::Reference(nom("a").versioned(1))
        );
        let c_head = engine.store().get_record(&nom("c").versioned(3)).unwrap();
        let (_, c_slots) = parse_entity_payload(c_head.payload()).unwrap();
        assert_eq!(
            c_slots["link"],
            DocumentValue::Reference(nom("b").versioned(3))
        );
        assert!(engine.verify_integrity(None).passed());
    }

    #[test]
    fn dag_cascade_invalidates_when_constraints_forbid_repair() {
        let engine = engine_with(true);
        for name in ["a", "b", "c"] {
            create_node(&engine, name);
        }
        link(&engine, "b", "a");
        link(&engine, "c", "b");

        engine.revoke(&su(), &nom("a").versioned(1), "recalled").unwrap();
        let outcome = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 5)
            .unwrap();

        // b cannot be valid while a's head is invalid; same for c after b
        assert_eq!(outcome.invalidated, BTreeSet::from([nom("b"), nom("c")]));
        assert!(outcome.repaired.is_empty());
        for name in ["b", "c"] {
            assert_eq!(engine.store().history(&nom(name)).unwrap().len(), 3);
            let head = engine.store().head(&nom(name)).unwrap();
            let record = engine.store().get_record(&head).unwrap();
            assert!(!record.status().is_valid());
        }
        assert!(engine.verify_integrity(None).passed());
    }

    #[test]
    fn two_cycle_cascade_terminates_with_both_unresolved() {
        let engine = engine_with(true);
        create_node(&engine, "a");
        create_node(&engine, "b");
        link(&engine, "a", "b");
        link(&engine, "b", "a");

        engine
            .revoke(&su(), &engine.store().head(&nom("a")).unwrap(), "recalled")
            .unwrap();
        let outcome = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 3)
            .unwrap();

        assert!(outcome.cyclic);
        assert!(outcome.rounds_used <= 3);
        assert_eq!(
            outcome.unresolved,
            BTreeSet::from([nom("a"), nom("b")])
        );
        assert_eq!(outcome.invalidated, BTreeSet::from([nom("b")]));
        for name in ["a", "b"] {
            let head = engine.store().head(&nom(name)).unwrap();
            assert!(!engine.store().get_record(&head).unwrap().status().is_valid());
        }

        // the cascade is re-runnable and quiesces immediately
        let again = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 3)
            .unwrap();
        assert_eq!(again.unresolved, BTreeSet::from([nom("a"), nom("b")]));
        assert!(again.invalidated.is_empty());
        assert!(engine.verify_integrity(None).passed());
    }

    #[test]
    fn cycle_repair_succeeds_when_constraints_allow() {
        // without validity constraints the cycle just recommits cleanly
        let engine = engine_with(false);
        create_node(&engine, "a");
        create_node(&engine, "b");
        link(&engine, "a", "b");
        link(&engine, "b", "a");

        engine
            .revoke(&su(), &engine.store().head(&nom("a")).unwrap(), "recalled")
            .unwrap();
        let outcome = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 3)
            .unwrap();
        assert!(outcome.cyclic);
        assert_eq!(outcome.repaired, BTreeSet::from([nom("b")]));
        // b was repaired, so only the seed keeps an invalid head
        assert_eq!(outcome.unresolved, BTreeSet::from([nom("a")]));
    }

    #[test]
    fn cascade_validates_its_arguments() {
        let engine = engine_with(false);
        create_node(&engine, "a");
        assert!(matches!(
            engine.cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::ForceState, 3),
            Err(RevocationError::UnsupportedStrategy(_))
        ));
        assert!(matches!(
            engine.cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 0),
            Err(RevocationError::InvalidMaxRounds)
        ));
        assert!(matches!(
            engine.cascade_revalidate(&su(), &[nom("missing")], CascadeStrategy::Lazy, 3),
            Err(RevocationError::Engine(EngineError::NotFound(_)))
        ));
        assert_eq!(CascadeStrategy::parse("lazy"), Some(CascadeStrategy::Lazy));
        assert_eq!(CascadeStrategy::parse("eager"), None);
    }

    #[test]
    fn set_members_are_repointed_to_repaired_dependees() {
        let engine = engine_with(false);
        for name in ["a", "x", "hub"] {
            create_node(&engine, name);
        }
        link(&engine, "x", "a"); // x@2 -> a@1
        let outcome = engine.in_transaction(&su(), |tx| {
            let x = tx.read(&nom("x"))?;
            tx.read(&nom("hub"))?.add_to_set("links", x.reference())?;
            tx.commit()
        });
        assert!(outcome.is_committed()); // hub@2 links: [x@2]

        engine.revoke(&su(), &nom("a").versioned(1), "recalled").unwrap();
        let cascade = engine
            .cascade_revalidate(&su(), &[nom("a")], CascadeStrategy::Lazy, 3)
            .unwrap();
        assert_eq!(cascade.repaired, BTreeSet::from([nom("x"), nom("hub")]));

        // x was recommitted as x@3; hub's set member must follow it
        let head = engine.store().head(&nom("hub")).unwrap();
        let record = engine.store().get_record(&head).unwrap();
        let (_, slots) = parse_entity_payload(record.payload()).unwrap();
        assert_eq!(
            slots["links"],
            DocumentValue::Array(vec![DocumentValue::Reference(nom("x").versioned(3))])
        );
        assert!(engine.verify_integrity(None).passed());
    }
}

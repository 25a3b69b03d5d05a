//! Entity schemas, typechecking, and domain constraints.
//!
//! A schema names an entity kind, lists its typed slots, and may inherit
//! slots and constraints from a single parent. Schemas registered here are
//! write-once: the data model can grow but never silently change under
//! existing records. Typechecking is structural ("is this slot map shaped
//! like the schema says") with an optional deep mode that also resolves
//! references and checks the referent's schema. Domain constraints are
//! named predicates over a slot map; a predicate that panics counts as a
//! failure of that constraint, never as a pass.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::codec::{encode_canonical, DocumentValue};
use crate::ids::{NominativeId, Version, VersionedId};
use crate::store::StoredRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema {0:?} is already registered")]
    DuplicateSchema(String),
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("schema {schema:?} names unregistered parent {parent:?}")]
    ParentNotFound { schema: String, parent: String },
    #[error("schema {schema:?} declares slot {slot:?} twice")]
    DuplicateSlot { schema: String, slot: String },
    #[error("slot {slot:?} of {schema:?} shadows the same slot of {ancestor:?}")]
    SlotShadowed {
        schema: String,
        slot: String,
        ancestor: String,
    },
    #[error("schema {0:?} is not a role")]
    NotARole(String),
    #[error("type check failed: {0}")]
    TypeMismatch(String),
    #[error("payload is not an entity envelope")]
    NotAnEntity,
}

/// Slot value types.
#[derive(Debug, Clone)]
pub enum AtomicType {
    Text,
    Integer,
    Float,
    Boolean,
    DateAndTime,
    /// An inline record value, stored in place rather than referenced.
    Composite(Arc<CompositeType>),
    /// A reference to the named entity kind (or one of its sub-kinds).
    RefTo(String),
    /// An unordered collection with no duplicate elements.
    SetOf(Box<AtomicType>),
}

impl AtomicType {
    pub fn set_of(inner: AtomicType) -> AtomicType {
        AtomicType::SetOf(Box::new(inner))
    }

    pub fn ref_to(schema: impl Into<String>) -> AtomicType {
        AtomicType::RefTo(schema.into())
    }

    fn describe(&self) -> String {
        match self {
            AtomicType::Text => "text".to_string(),
            AtomicType::Integer => "integer".to_string(),
            AtomicType::Float => "float".to_string(),
            AtomicType::Boolean => "boolean".to_string(),
            AtomicType::DateAndTime => "date-and-time".to_string(),
            AtomicType::Composite(c) => format!("composite {}", c.name),
            AtomicType::RefTo(s) => format!("ref to {s}"),
            AtomicType::SetOf(inner) => format!("set of {}", inner.describe()),
        }
    }

    /// The value a slot of this type holds before anything is written to it.
    pub fn default_value(&self) -> DocumentValue {
        match self {
            AtomicType::Text => DocumentValue::text(""),
            AtomicType::Integer => DocumentValue::Integer(0),
            AtomicType::Float => DocumentValue::Float(0.0),
            AtomicType::Boolean => DocumentValue::Boolean(false),
            AtomicType::DateAndTime => DocumentValue::Timestamp(0),
            AtomicType::Composite(c) => DocumentValue::Map(
                c.slots
                    .iter()
                    .map(|(name, ty)| (name.clone(), ty.default_value()))
                    .collect(),
            ),
            AtomicType::RefTo(_) => DocumentValue::Null,
            AtomicType::SetOf(_) => DocumentValue::Array(Vec::new()),
        }
    }
}

/// A named record type for inline values (no identity, no versioning).
#[derive(Debug, Clone)]
pub struct CompositeType {
    pub name: String,
    pub slots: BTreeMap<String, AtomicType>,
}

impl CompositeType {
    pub fn new(
        name: impl Into<String>,
        slots: impl IntoIterator<Item = (&'static str, AtomicType)>,
    ) -> Arc<CompositeType> {
        Arc::new(CompositeType {
            name: name.into(),
            slots: slots
                .into_iter()
                .map(|(n, t)| (n.to_string(), t))
                .collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SlotDefinition {
    pub name: String,
    pub slot_type: AtomicType,
}

/// A named predicate over an entity's slots. Receives a read view of the
/// store so constraints can look at referenced objects.
#[derive(Clone)]
pub struct DomainPredicate {
    name: String,
    check: Arc<dyn Fn(&BTreeMap<String, DocumentValue>, &dyn StoreView) -> bool + Send + Sync>,
}

impl DomainPredicate {
    pub fn new<F>(name: impl Into<String>, check: F) -> Self
    where
        F: Fn(&BTreeMap<String, DocumentValue>, &dyn StoreView) -> bool + Send + Sync + 'static,
    {
        DomainPredicate {
            name: name.into(),
            check: Arc::new(check),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl std::fmt::Debug for DomainPredicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DomainPredicate({:?})", self.name)
    }
}

/// Read access to stored state, as seen by typechecks and constraints.
/// Implementations decide whether this is live data or a snapshot.
pub trait StoreView {
    fn head_version(&self, nominative: &NominativeId) -> Option<Version>;
    fn get_record(&self, id: &VersionedId) -> Option<Arc<StoredRecord>>;
}

/// How one domain constraint fared against a slot map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainIssue {
    pub constraint: String,
    /// True when the predicate panicked instead of returning false.
    pub crashed: bool,
}

#[derive(Debug)]
pub struct EntitySchema {
    name: String,
    parent: Option<String>,
    own_slots: Vec<SlotDefinition>,
    constraints: Vec<DomainPredicate>,
    is_role: bool,
}

impl EntitySchema {
    pub fn builder(name: impl Into<String>) -> EntitySchemaBuilder {
        EntitySchemaBuilder {
            name: name.into(),
            parent: None,
            slots: Vec::new(),
            constraints: Vec::new(),
            is_role: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parent(&self) -> Option<&str> {
        self.parent.as_deref()
    }

    pub fn own_slots(&self) -> &[SlotDefinition] {
        &self.own_slots
    }

    pub fn is_role(&self) -> bool {
        self.is_role
    }
}

pub struct EntitySchemaBuilder {
    name: String,
    parent: Option<String>,
    slots: Vec<SlotDefinition>,
    constraints: Vec<DomainPredicate>,
    is_role: bool,
}

impl EntitySchemaBuilder {
    pub fn parent(mut self, name: impl Into<String>) -> Self {
        self.parent = Some(name.into());
        self
    }

    pub fn slot(mut self, name: impl Into<String>, slot_type: AtomicType) -> Self {
        self.slots.push(SlotDefinition {
            name: name.into(),
            slot_type,
        });
        self
    }

    pub fn constraint<F>(mut self, name: impl Into<String>, check: F) -> Self
    where
        F: Fn(&BTreeMap<String, DocumentValue>, &dyn StoreView) -> bool + Send + Sync + 'static,
    {
        self.constraints.push(DomainPredicate::new(name, check));
        self
    }

    /// Marks instances of this schema as usable for acting in transactions.
    pub fn role(mut self) -> Self {
        self.is_role = true;
        self
    }

    pub fn build(self) -> EntitySchema {
        EntitySchema {
            name: self.name,
            parent: self.parent,
            own_slots: self.slots,
            constraints: self.constraints,
            is_role: self.is_role,
        }
    }
}

/// Write-once collection of schemas.
#[derive(Default)]
pub struct SchemaRegistry {
    schemas: RwLock<BTreeMap<String, Arc<EntitySchema>>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        SchemaRegistry::default()
    }

    /// Registers a schema after validating its name is fresh, its parent
    /// exists, and no slot collides with an inherited one.
    pub fn register(&self, schema: EntitySchema) -> Result<(), SchemaError> {
        let mut schemas = self.schemas.write().unwrap();
        if schemas.contains_key(&schema.name) {
            return Err(SchemaError::DuplicateSchema(schema.name));
        }
        let mut inherited: BTreeMap<String, String> = BTreeMap::new();
        if let Some(parent) = &schema.parent {
            let mut cursor = Some(parent.clone());
            while let Some(name) = cursor {
                let ancestor = schemas.get(&name).ok_or(SchemaError::ParentNotFound {
                    schema: schema.name.clone(),
                    parent: name.clone(),
                })?;
                for slot in &ancestor.own_slots {
                    inherited.entry(slot.name.clone()).or_insert(name.clone());
                }
                cursor = ancestor.parent.clone();
            }
        }
        let mut seen = BTreeSet::new();
        for slot in &schema.own_slots {
            if !seen.insert(slot.name.clone()) {
                return Err(SchemaError::DuplicateSlot {
                    schema: schema.name,
                    slot: slot.name.clone(),
                });
            }
            if let Some(ancestor) = inherited.get(&slot.name) {
                return Err(SchemaError::SlotShadowed {
                    schema: schema.name,
                    slot: slot.name.clone(),
                    ancestor: ancestor.clone(),
                });
            }
        }
        schemas.insert(schema.name.clone(), Arc::new(schema));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<EntitySchema>, SchemaError> {
        self.schemas
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| SchemaError::UnknownSchema(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.schemas.read().unwrap().keys().cloned().collect()
    }

    /// Inherited slots first (root ancestor onwards), then own slots.
    pub fn effective_slots(&self, name: &str) -> Result<Vec<SlotDefinition>, SchemaError> {
        let mut chain = Vec::new();
        let mut cursor = Some(name.to_string());
        while let Some(n) = cursor {
            let schema = self.get(&n)?;
            cursor = schema.parent.clone();
            chain.push(schema);
        }
        chain.reverse();
        Ok(chain
            .iter()
            .flat_map(|s| s.own_slots.iter().cloned())
            .collect())
    }

    fn effective_constraints(&self, name: &str) -> Result<Vec<DomainPredicate>, SchemaError> {
        let mut out = Vec::new();
        let mut chain = Vec::new();
        let mut cursor = Some(name.to_string());
        while let Some(n) = cursor {
            let schema = self.get(&n)?;
            cursor = schema.parent.clone();
            chain.push(schema);
        }
        chain.reverse();
        for schema in chain {
            out.extend(schema.constraints.iter().cloned());
        }
        Ok(out)
    }

    /// Is `child` the same schema as `ancestor` or derived from it?
    pub fn is_kind_of(&self, child: &str, ancestor: &str) -> Result<bool, SchemaError> {
        let mut cursor = Some(child.to_string());
        while let Some(n) = cursor {
            if n == ancestor {
                return Ok(true);
            }
            cursor = self.get(&n)?.parent.clone();
        }
        Ok(false)
    }

    /// A fresh slot map with every effective slot at its default value.
    pub fn default_slots(
        &self,
        name: &str,
    ) -> Result<BTreeMap<String, DocumentValue>, SchemaError> {
        Ok(self
            .effective_slots(name)?
            .into_iter()
            .map(|slot| (slot.name, slot.slot_type.default_value()))
            .collect())
    }

    /// Structural check: the slot map must carry exactly the effective
    /// slots, each with a value of the declared type. Returns every
    /// problem found, not just the first.
    pub fn typecheck_collect(
        &self,
        name: &str,
        slots: &BTreeMap<String, DocumentValue>,
        view: Option<&dyn StoreView>,
    ) -> Result<Vec<String>, SchemaError> {
        let declared = self.effective_slots(name)?;
        let mut problems = Vec::new();
        let declared_names: BTreeSet<&str> =
            declared.iter().map(|s| s.name.as_str()).collect();
        for key in slots.keys() {
            if !declared_names.contains(key.as_str()) {
                problems.push(format!("{name} has no slot {key:?}"));
            }
        }
        for slot in &declared {
            match slots.get(&slot.name) {
                None => problems.push(format!("missing slot {:?} of {name}", slot.name)),
                Some(value) => self.check_value(
                    &slot.slot_type,
                    value,
                    &format!("{name}.{}", slot.name),
                    view,
                    &mut problems,
                ),
            }
        }
        Ok(problems)
    }

    /// First-error form of [`SchemaRegistry::typecheck_collect`].
    pub fn typecheck(
        &self,
        name: &str,
        slots: &BTreeMap<String, DocumentValue>,
    ) -> Result<(), SchemaError> {
        let problems = self.typecheck_collect(name, slots, None)?;
        match problems.into_iter().next() {
            None => Ok(()),
            Some(p) => Err(SchemaError::TypeMismatch(p)),
        }
    }

    fn check_value(
        &self,
        ty: &AtomicType,
        value: &DocumentValue,
        at: &str,
        view: Option<&dyn StoreView>,
        problems: &mut Vec<String>,
    ) {
        let mismatch = |problems: &mut Vec<String>| {
            problems.push(format!(
                "{at} expects {}, got {}",
                ty.describe(),
                value.type_name()
            ));
        };
        match ty {
            AtomicType::Text => {
                if value.as_text().is_none() {
                    mismatch(problems);
                }
            }
            AtomicType::Integer => {
                if value.as_integer().is_none() {
                    mismatch(problems);
                }
            }
            AtomicType::Float => {
                if value.as_float().is_none() {
                    mismatch(problems);
                }
            }
            AtomicType::Boolean => {
                if !matches!(value, DocumentValue::Boolean(_)) {
                    mismatch(problems);
                }
            }
            AtomicType::DateAndTime => {
                if value.as_timestamp().is_none() {
                    mismatch(problems);
                }
            }
            AtomicType::Composite(composite) => match value.as_map() {
                None => mismatch(problems),
                Some(map) => {
                    for key in map.keys() {
                        if !composite.slots.contains_key(key) {
                            problems.push(format!("{at} has no field {key:?}"));
                        }
                    }
                    for (field, field_ty) in &composite.slots {
                        match map.get(field) {
                            None => problems.push(format!("{at} is missing field {field:?}")),
                            Some(v) => self.check_value(
                                field_ty,
                                v,
                                &format!("{at}.{field}"),
                                view,
                                problems,
                            ),
                        }
                    }
                }
            },
            AtomicType::RefTo(target) => match value {
                DocumentValue::Null => {}
                DocumentValue::Reference(id) => {
                    if let Some(view) = view {
                        self.check_referent(target, id, at, view, problems);
                    }
                }
                _ => mismatch(problems),
            },
            AtomicType::SetOf(inner) => match value.as_array() {
                None => mismatch(problems),
                Some(items) => {
                    let mut seen = BTreeSet::new();
                    for (i, item) in items.iter().enumerate() {
                        self.check_value(inner, item, &format!("{at}[{i}]"), view, problems);
                        if let Ok(bytes) = encode_canonical(item) {
                            if !seen.insert(bytes) {
                                problems.push(format!("{at} contains a duplicate element"));
                            }
                        }
                    }
                }
            },
        }
    }

    fn check_referent(
        &self,
        target: &str,
        id: &VersionedId,
        at: &str,
        view: &dyn StoreView,
        problems: &mut Vec<String>,
    ) {
        let Some(record) = view.get_record(id) else {
            problems.push(format!("{at} references missing record {id}"));
            return;
        };
        match parse_entity_payload(record.payload()) {
            Some((schema, _)) => match self.is_kind_of(schema, target) {
                Ok(true) => {}
                Ok(false) => problems.push(format!(
                    "{at} references {id} of kind {schema}, expected {target}"
                )),
                Err(e) => problems.push(format!("{at}: {e}")),
            },
            None => problems.push(format!("{at} references non-entity record {id}")),
        }
    }

    /// Runs every effective constraint. A panicking predicate is reported
    /// with `crashed: true` and treated as failed.
    pub fn check_domain_constraints(
        &self,
        name: &str,
        slots: &BTreeMap<String, DocumentValue>,
        view: &dyn StoreView,
    ) -> Result<Vec<DomainIssue>, SchemaError> {
        let mut issues = Vec::new();
        for predicate in self.effective_constraints(name)? {
            let outcome = catch_unwind(AssertUnwindSafe(|| (predicate.check)(slots, view)));
            match outcome {
                Ok(true) => {}
                Ok(false) => issues.push(DomainIssue {
                    constraint: predicate.name.clone(),
                    crashed: false,
                }),
                Err(_) => issues.push(DomainIssue {
                    constraint: predicate.name.clone(),
                    crashed: true,
                }),
            }
        }
        Ok(issues)
    }
}

/// The payload envelope for entity records: `{"schema": ..., "slots": ...}`.
pub fn entity_payload(schema: &str, slots: &BTreeMap<String, DocumentValue>) -> DocumentValue {
    let mut m = BTreeMap::new();
    m.insert("schema".to_string(), DocumentValue::text(schema));
    m.insert("slots".to_string(), DocumentValue::Map(slots.clone()));
    DocumentValue::Map(m)
}

pub fn parse_entity_payload(
    payload: &DocumentValue,
) -> Option<(&str, &BTreeMap<String, DocumentValue>)> {
    let map = payload.as_map()?;
    if map.len() != 2 {
        return None;
    }
    let schema = map.get("schema")?.as_text()?;
    let slots = match map.get("slots")? {
        DocumentValue::Map(m) => m,
        _ => return None,
    };
    Some((schema, slots))
}

/// The payload of a conflict-set record: `{"conflict": [refs...]}` with
/// members in canonical (sorted) order.
pub fn conflict_payload(members: &[VersionedId]) -> DocumentValue {
    let mut sorted: Vec<VersionedId> = members.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut m = BTreeMap::new();
    m.insert(
        "conflict".to_string(),
        DocumentValue::Array(sorted.into_iter().map(DocumentValue::Reference).collect()),
    );
    DocumentValue::Map(m)
}

pub fn parse_conflict_payload(payload: &DocumentValue) -> Option<Vec<VersionedId>> {
    let map = payload.as_map()?;
    if map.len() != 1 {
        return None;
    }
    let items = map.get("conflict")?.as_array()?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        out.push(item.as_reference()?.clone());
    }
    Some(out)
}

/// An actor that transactions run under. The built-in super-user has no
/// backing record; every other role is an entity whose schema is marked
/// with [`EntitySchemaBuilder::role`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteRole {
    role_id: String,
    backing: Option<VersionedId>,
}

pub const SUPER_USER_ROLE: &str = "super-user";

impl ConcreteRole {
    /// The bootstrap actor that exists before any records do.
    pub fn super_user() -> Self {
        ConcreteRole {
            role_id: SUPER_USER_ROLE.to_string(),
            backing: None,
        }
    }

    /// A role acting as the entity stored under `backing`.
    pub fn from_record(backing: VersionedId) -> Self {
        ConcreteRole {
            role_id: backing.nominative().to_string(),
            backing: Some(backing),
        }
    }

    pub fn role_id(&self) -> &str {
        &self.role_id
    }

    pub fn backing(&self) -> Option<&VersionedId> {
        self.backing.as_ref()
    }

    pub fn is_super_user(&self) -> bool {
        self.backing.is_none() && self.role_id == SUPER_USER_ROLE
    }
}

#![forbid(unsafe_code)]

//! An embeddable object store that keeps every version of every object,
//! remembers who wrote each one, and can prove its data is still the data
//! that was written.
//!
//! The pieces, bottom up:
//!
//! - [`ids`]: nominative and versioned identifiers.
//! - [`codec`]: canonical document encoding and SHA-256 content hashing.
//! - [`clock`]: injectable time sources, including a virtual clock.
//! - [`store`]: append-only records, heads, history, memory and file-log
//!   backends.
//! - [`schema`]: entity schemas with inheritance, typed slots, domain
//!   constraints, and roles.
//! - [`engine`]: snapshot-isolation transactions over the store, with
//!   strict first-committer-wins and conflict-set fallback modes.
//! - [`integrity`]: verification on three levels, revocation, and
//!   revalidation cascades across dependents.

pub mod clock;
pub mod codec;
pub mod demo;
pub mod engine;
pub mod ids;
pub mod integrity;
pub mod schema;
pub mod store;

//! Canonical document encoding and content hashing.
//!
//! Every stored payload is a [`DocumentValue`] tree. Encoding is a tagged
//! binary format designed so that equal documents always produce identical
//! bytes, which makes content hashes and byte-level comparisons meaningful.
//!
//! Wire format (all multi-byte integers big-endian):
//!
//! | tag    | value       | body                                            |
//! |--------|-------------|-------------------------------------------------|
//! | `0x00` | null        | empty                                           |
//! | `0x01` | false       | empty                                           |
//! | `0x02` | true        | empty                                           |
//! | `0x03` | integer     | 8-byte two's complement                         |
//! | `0x04` | float       | 8-byte IEEE-754 bit pattern                     |
//! | `0x05` | text        | 4-byte length, then UTF-8 bytes                 |
//! | `0x06` | array       | 4-byte count, then each element                 |
//! | `0x07` | map         | 4-byte count, then sorted key/value pairs       |
//! | `0x08` | timestamp   | 8-byte signed microseconds since the Unix epoch |
//! | `0x09` | reference   | 4-byte length, then UTF-8 of `name@version`     |
//!
//! Map keys are written as a 4-byte length plus UTF-8 bytes and must appear
//! in strictly ascending byte order; duplicates are impossible to encode and
//! rejected on decode. Floats must be finite, and `-0.0` is normalized to
//! `+0.0` before encoding so the two never hash differently. The decoder
//! accepts exactly the canonical form: unknown tags, non-canonical floats,
//! unsorted keys, trailing bytes, and truncated input are all errors.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::VersionedId;

const TAG_NULL: u8 = 0x00;
const TAG_FALSE: u8 = 0x01;
const TAG_TRUE: u8 = 0x02;
const TAG_INTEGER: u8 = 0x03;
const TAG_FLOAT: u8 = 0x04;
const TAG_TEXT: u8 = 0x05;
const TAG_ARRAY: u8 = 0x06;
const TAG_MAP: u8 = 0x07;
const TAG_TIMESTAMP: u8 = 0x08;
const TAG_REFERENCE: u8 = 0x09;

/// Nesting bound for both encode and decode. Documents are finite trees;
/// anything deeper than this is rejected rather than risking stack overflow.
pub const MAX_DEPTH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("float values must be finite")]
    NonFiniteFloat,
    #[error("duplicate map key {0:?}")]
    DuplicateKey(String),
    #[error("document nesting exceeds {MAX_DEPTH} levels")]
    DepthExceeded,
    #[error("value too large to encode")]
    TooLarge,
    #[error("input ends mid-value")]
    Truncated,
    #[error("unknown tag byte 0x{0:02x}")]
    UnknownTag(u8),
    #[error("map keys out of canonical order")]
    NonCanonicalOrdering,
    #[error("non-canonical float bit pattern")]
    NonCanonicalFloat,
    #[error("text is not valid UTF-8")]
    InvalidUtf8,
    #[error("malformed reference {0:?}")]
    InvalidReference(String),
    #[error("{0} trailing bytes after document")]
    TrailingBytes(usize),
}

/// One node of a document tree.
///
/// `Timestamp` carries microseconds since the Unix epoch, UTC. `Reference`
/// names one exact record version in the store. Map keys are kept in a
/// `BTreeMap`, so a map is already in canonical key order by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum DocumentValue {
    Null,
    Boolean(bool),
    Integer(i64),
    Float(f64),
    Text(String),
    Timestamp(i64),
    Reference(VersionedId),
    Array(Vec<DocumentValue>),
    Map(BTreeMap<String, DocumentValue>),
}

impl DocumentValue {
    pub fn text(s: impl Into<String>) -> Self {
        DocumentValue::Text(s.into())
    }

    /// Builds a map, rejecting duplicate keys instead of silently keeping one.
    pub fn map_from_pairs<I>(pairs: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = (String, DocumentValue)>,
    {
        let mut map = BTreeMap::new();
        for (key, value) in pairs {
            if map.insert(key.clone(), value).is_some() {
                return Err(CodecError::DuplicateKey(key));
            }
        }
        Ok(DocumentValue::Map(map))
    }

    pub fn empty_map() -> Self {
        DocumentValue::Map(BTreeMap::new())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            DocumentValue::Null => "null",
            DocumentValue::Boolean(_) => "boolean",
            DocumentValue::Integer(_) => "integer",
            DocumentValue::Float(_) => "float",
            DocumentValue::Text(_) => "text",
            DocumentValue::Timestamp(_) => "timestamp",
            DocumentValue::Reference(_) => "reference",
            DocumentValue::Array(_) => "array",
            DocumentValue::Map(_) => "map",
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, DocumentValue>> {
        match self {
            DocumentValue::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[DocumentValue]> {
        match self {
            DocumentValue::Array(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            DocumentValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<i64> {
        match self {
            DocumentValue::Integer(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            DocumentValue::Float(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_timestamp(&self) -> Option<i64> {
        match self {
            DocumentValue::Timestamp(t) => Some(*t),
            _ => None,
        }
    }

    pub fn as_reference(&self) -> Option<&VersionedId> {
        match self {
            DocumentValue::Reference(id) => Some(id),
            _ => None,
        }
    }
}

/// A SHA-256 digest of a document's canonical bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashDigest([u8; 32]);

impl HashDigest {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        HashDigest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(64);
        for b in self.0 {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        if text.len() != 64 {
            return None;
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in text.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            bytes[i] = (hi * 16 + lo) as u8;
        }
        Some(HashDigest(bytes))
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashDigest({})", self.to_hex())
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Encodes a document into its unique canonical byte string.
pub fn encode_canonical(doc: &DocumentValue) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    encode_into(doc, &mut out, 0)?;
    Ok(out)
}

fn encode_into(doc: &DocumentValue, out: &mut Vec<u8>, depth: usize) -> Result<(), CodecError> {
    if depth > MAX_DEPTH {
        return Err(CodecError::DepthExceeded);
    }
    match doc {
        DocumentValue::Null => out.push(TAG_NULL),
        DocumentValue::Boolean(false) => out.push(TAG_FALSE),
        DocumentValue::Boolean(true) => out.push(TAG_TRUE),
        DocumentValue::Integer(n) => {
            out.push(TAG_INTEGER);
            out.extend_from_slice(&n.to_be_bytes());
        }
        DocumentValue::Float(x) => {
            if !x.is_finite() {
                return Err(CodecError::NonFiniteFloat);
            }
            let normalized = if *x == 0.0 { 0.0 } else { *x };
            out.push(TAG_FLOAT);
            out.extend_from_slice(&normalized.to_bits().to_be_bytes());
        }
        DocumentValue::Text(s) => {
            out.push(TAG_TEXT);
            encode_len_bytes(s.as_bytes(), out)?;
        }
        DocumentValue::Timestamp(t) => {
            out.push(TAG_TIMESTAMP);
            out.extend_from_slice(&t.to_be_bytes());
        }
        DocumentValue::Reference(id) => {
            out.push(TAG_REFERENCE);
            encode_len_bytes(id.to_string().as_bytes(), out)?;
        }
        DocumentValue::Array(items) => {
            out.push(TAG_ARRAY);
            out.extend_from_slice(&u32_len(items.len())?.to_be_bytes());
            for item in items {
                encode_into(item, out, depth + 1)?;
            }
        }
        DocumentValue::Map(map) => {
            out.push(TAG_MAP);
            out.extend_from_slice(&u32_len(map.len())?.to_be_bytes());
            for (key, value) in map {
                encode_len_bytes(key.as_bytes(), out)?;
                encode_into(value, out, depth + 1)?;
            }
        }
    }
    Ok(())
}

fn encode_len_bytes(bytes: &[u8], out: &mut Vec<u8>) -> Result<(), CodecError> {
    out.extend_from_slice(&u32_len(bytes.len())?.to_be_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn u32_len(len: usize) -> Result<u32, CodecError> {
    u32::try_from(len).map_err(|_| CodecError::TooLarge)
}

/// Decodes one canonical document occupying the entire input.
pub fn decode(bytes: &[u8]) -> Result<DocumentValue, CodecError> {
    let mut reader = Reader { bytes, pos: 0 };
    let doc = reader.value(0)?;
    if reader.pos != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - reader.pos));
    }
    Ok(doc)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CodecError::Truncated);
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self) -> Result<String, CodecError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::InvalidUtf8)
    }

    fn value(&mut self, depth: usize) -> Result<DocumentValue, CodecError> {
        if depth > MAX_DEPTH {
            return Err(CodecError::DepthExceeded);
        }
        let tag = self.take(1)?[0];
        match tag {
            TAG_NULL => Ok(DocumentValue::Null),
            TAG_FALSE => Ok(DocumentValue::Boolean(false)),
            TAG_TRUE => Ok(DocumentValue::Boolean(true)),
            TAG_INTEGER => Ok(DocumentValue::Integer(self.i64()?)),
            TAG_FLOAT => {
                let bits = self.i64()? as u64;
                let x = f64::from_bits(bits);
                if !x.is_finite() || bits == (-0.0f64).to_bits() {
                    return Err(CodecError::NonCanonicalFloat);
                }
                Ok(DocumentValue::Float(x))
            }
            TAG_TEXT => Ok(DocumentValue::Text(self.utf8()?)),
            TAG_TIMESTAMP => Ok(DocumentValue::Timestamp(self.i64()?)),
            TAG_REFERENCE => {
                let text = self.utf8()?;
                let id = VersionedId::parse(&text)
                    .map_err(|_| CodecError::InvalidReference(text))?;
                Ok(DocumentValue::Reference(id))
            }
            TAG_ARRAY => {
                let count = self.u32()? as usize;
                let mut items = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    items.push(self.value(depth + 1)?);
                }
                Ok(DocumentValue::Array(items))
            }
            TAG_MAP => {
                let count = self.u32()? as usize;
                let mut map = BTreeMap::new();
                let mut last_key: Option<String> = None;
                for _ in 0..count {
                    let key = self.utf8()?;
                    if let Some(prev) = &last_key {
                        if prev.as_bytes() >= key.as_bytes() {
                            return Err(CodecError::NonCanonicalOrdering);
                        }
                    }
                    let value = self.value(depth + 1)?;
                    last_key = Some(key.clone());
                    map.insert(key, value);
                }
                Ok(DocumentValue::Map(map))
            }
            other => Err(CodecError::UnknownTag(other)),
        }
    }
}

/// SHA-256 over the canonical encoding.
pub fn content_hash(doc: &DocumentValue) -> Result<HashDigest, CodecError> {
    let bytes = encode_canonical(doc)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    Ok(HashDigest(out))
}

/// True iff the document's recomputed hash matches `claimed`.
/// An unencodable document matches nothing.
pub fn verify_bits(doc: &DocumentValue, claimed: &HashDigest) -> bool {
    match content_hash(doc) {
        Ok(actual) => actual == *claimed,
        Err(_) => false,
    }
}

/// Collects every reference in the tree, depth-first, duplicates included.
pub fn collect_references(doc: &DocumentValue) -> Vec<VersionedId> {
    let mut out = Vec::new();
    collect_refs_into(doc, &mut out);
    out
}

fn collect_refs_into(doc: &DocumentValue, out: &mut Vec<VersionedId>) {
    match doc {
        DocumentValue::Reference(id) => out.push(id.clone()),
        DocumentValue::Array(items) => {
            for item in items {
                collect_refs_into(item, out);
            }
        }
        DocumentValue::Map(map) => {
            for value in map.values() {
                collect_refs_into(value, out);
            }
        }
        _ => {}
    }
}

/// Renders a document as JSON text for logs and CLI output. Timestamps and
/// references use tagged single-key objects so they stay distinguishable
/// from plain integers and text.
pub fn render_debug(doc: &DocumentValue) -> String {
    to_json(doc).to_string()
}

fn to_json(doc: &DocumentValue) -> serde_json::Value {
    use serde_json::{json, Value};
    match doc {
        DocumentValue::Null => Value::Null,
        DocumentValue::Boolean(b) => Value::Bool(*b),
        DocumentValue::Integer(n) => json!(n),
        DocumentValue::Float(x) => {
            serde_json::Number::from_f64(*x).map_or_else(|| json!(x.to_string()), Value::Number)
        }
        DocumentValue::Text(s) => Value::String(s.clone()),
        DocumentValue::Timestamp(t) => json!({ "$timestamp_us": t }),
        DocumentValue::Reference(id) => json!({ "$ref": id.to_string() }),
        DocumentValue::Array(items) => Value::Array(items.iter().map(to_json).collect()),
        DocumentValue::Map(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), to_json(v)))
                .collect(),
        ),
    }
}

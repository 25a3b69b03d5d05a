//! Object identity.
//!
//! A [`NominativeId`] is the stable name of an object: a non-empty path of
//! segments rendered with `/` between them, e.g. `Patient/watch`. Segments
//! may not contain `/` or `@`. A [`VersionedId`] pins a nominative ID to one
//! version number (`name@3`) and identifies a single immutable record.

use std::fmt;

use thiserror::Error;

/// Version numbers start at 1; 0 is never a valid stored version.
pub type Version = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("nominative ID needs at least one segment")]
    EmptyPath,
    #[error("nominative ID segment is empty")]
    EmptySegment,
    #[error("segment {0:?} contains reserved character {1:?}")]
    ReservedCharacter(String, char),
    #[error("{0:?} is missing an '@version' suffix")]
    MissingVersion(String),
    #[error("invalid version number {0:?}")]
    InvalidVersion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NominativeId {
    segments: Vec<String>,
}

impl NominativeId {
    pub fn new<I, S>(segments: I) -> Result<Self, IdError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.is_empty() {
            return Err(IdError::EmptyPath);
        }
        for seg in &segments {
            if seg.is_empty() {
                return Err(IdError::EmptySegment);
            }
            for reserved in ['/', '@'] {
                if seg.contains(reserved) {
                    return Err(IdError::ReservedCharacter(seg.clone(), reserved));
                }
            }
        }
        Ok(NominativeId { segments })
    }

    pub fn single(name: &str) -> Result<Self, IdError> {
        NominativeId::new([name])
    }

    /// Parses the rendered form, splitting on `/`.
    pub fn parse(text: &str) -> Result<Self, IdError> {
        if text.is_empty() {
            return Err(IdError::EmptyPath);
        }
        NominativeId::new(text.split('/'))
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn versioned(&self, version: Version) -> VersionedId {
        VersionedId::new(self.clone(), version)
    }
}

impl fmt::Display for NominativeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VersionedId {
    nominative: NominativeId,
    version: Version,
}

impl VersionedId {
    /// Panics if `version` is 0.
    pub fn new(nominative: NominativeId, version: Version) -> Self {
        assert!(version >= 1, "version numbers start at 1");
        VersionedId {
            nominative,
            version,
        }
    }

    /// Parses `name@version`. The version suffix is mandatory.
    pub fn parse(text: &str) -> Result<Self, IdError> {
        let (name, version) = text
            .rsplit_once('@')
            .ok_or_else(|| IdError::MissingVersion(text.to_string()))?;
        let version: Version = version
            .parse()
            .map_err(|_| IdError::InvalidVersion(version.to_string()))?;
        if version == 0 {
            return Err(IdError::InvalidVersion(version.to_string()));
        }
        Ok(VersionedId {
            nominative: NominativeId::parse(name)?,
            version,
        })
    }

    pub fn nominative(&self) -> &NominativeId {
        &self.nominative
    }

    pub fn version(&self) -> Version {
        self.version
    }
}

impl fmt::Display for VersionedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.nominative, self.version)
    }
}

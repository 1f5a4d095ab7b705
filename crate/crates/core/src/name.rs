//! Hierarchical CCNx names.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("name is empty")]
    Empty,
    #[error("name must begin with '/': {0:?}")]
    NotAbsolute(String),
    #[error("empty segment in name {0:?}")]
    EmptySegment(String),
}

/// One non-empty name component.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment(Vec<u8>);

impl Segment {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, NameError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(NameError::EmptySegment(String::new()));
        }
        Ok(Segment(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> Option<&str> {
        core::str::from_utf8(&self.0).ok()
    }

    /// Parses a `key=value` segment such as `ver=7` and returns the numeric value.
    pub fn tagged_number(&self, key: &str) -> Option<u64> {
        let s = self.as_str()?;
        let rest = s.strip_prefix(key)?.strip_prefix('=')?;
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        rest.parse().ok()
    }
}

impl fmt::Debug for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", DisplaySegment(&self.0))
    }
}

struct DisplaySegment<'a>(&'a [u8]);

impl fmt::Display for DisplaySegment<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match core::str::from_utf8(self.0) {
            Ok(s) if !s.contains('/') => f.write_str(s),
            _ => {
                for b in self.0 {
                    if b.is_ascii_graphic() && *b != b'/' && *b != b'%' {
                        write!(f, "{}", *b as char)?;
                    } else {
                        write!(f, "%{:02X}", b)?;
                    }
                }
                Ok(())
            }
        }
    }
}

impl fmt::Debug for DisplaySegment<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A hierarchical name: zero or more non-empty segments.
///
/// `/` is the root name with no segments.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Name {
    segments: Vec<Segment>,
}

impl Name {
    pub fn root() -> Self {
        Name::default()
    }

    pub fn from_segments(segments: Vec<Segment>) -> Self {
        Name { segments }
    }

    /// Parses a URI-like path such as `/vm-name/checkpoint/ver=0/manifest`.
    pub fn parse(text: &str) -> Result<Self, NameError> {
        if text.is_empty() {
            return Err(NameError::Empty);
        }
        let rest = text
            .strip_prefix('/')
            .ok_or_else(|| NameError::NotAbsolute(text.to_owned()))?;
        if rest.is_empty() {
            return Ok(Name::root());
        }
        let segments = rest
            .split('/')
            .map(|s| {
                if s.is_empty() {
                    Err(NameError::EmptySegment(text.to_owned()))
                } else {
                    Ok(Segment(s.as_bytes().to_vec()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Name { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Returns a copy with one text segment appended.
    ///
    /// Panics if `segment` is empty.
    pub fn child(&self, segment: impl AsRef<[u8]>) -> Name {
        let mut n = self.clone();
        n.push(segment);
        n
    }

    pub fn push(&mut self, segment: impl AsRef<[u8]>) {
        let bytes = segment.as_ref();
        assert!(!bytes.is_empty(), "name segments must be non-empty");
        self.segments.push(Segment(bytes.to_vec()));
    }

    pub fn join(&self, other: &Name) -> Name {
        let mut n = self.clone();
        n.segments.extend(other.segments.iter().cloned());
        n
    }

    /// First `len` segments, or the whole name when it is shorter.
    pub fn prefix(&self, len: usize) -> Name {
        Name {
            segments: self.segments[..len.min(self.segments.len())].to_vec(),
        }
    }

    pub fn is_prefix_of(&self, other: &Name) -> bool {
        self.segments.len() <= other.segments.len()
            && self.segments[..] == other.segments[..self.segments.len()]
    }

    /// Segments of `self` after `prefix`, if `prefix` is a prefix.
    pub fn strip_prefix(&self, prefix: &Name) -> Option<&[Segment]> {
        prefix
            .is_prefix_of(self)
            .then(|| &self.segments[prefix.segments.len()..])
    }

    pub fn last(&self) -> Option<&Segment> {
        self.segments.last()
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("/");
        }
        for s in &self.segments {
            write!(f, "/{}", DisplaySegment(&s.0))?;
        }
        Ok(())
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Name({})", self)
    }
}

impl FromStr for Name {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Name::parse(s)
    }
}

impl Serialize for Name {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Name {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Name::parse(&s).map_err(de::Error::custom)
    }
}

//! Read code parsing, validation, and level-3 prefix aggregation.
//!
//! A clinical event is identified by a 7-character Read code: a 5-character
//! stem (significant characters padded to the right with dots) plus a
//! 2-character term code. The length of the leading non-dot run of the stem
//! is the code's hierarchy level (1-5). Collapsing codes that share the first
//! three stem characters merges sibling events into one level-3 event class.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Total code length: 5-character stem + 2-character term code.
pub const CODE_LEN: usize = 7;
/// Stem length within the full code.
pub const STEM_LEN: usize = 5;

/// Description returned for codes missing from a [`CodeDictionary`].
pub const UNKNOWN_DESCRIPTION: &str = "unknown";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("malformed read code {text:?}: {reason}")]
    MalformedCode { text: String, reason: &'static str },
}

/// A validated 7-character Read code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Readcode {
    raw: String,
    level: u8,
}

impl Readcode {
    /// The full 7-character code.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// The 5-character code body (significant characters plus dot padding).
    pub fn stem(&self) -> &str {
        &self.raw[..STEM_LEN]
    }

    /// The 2-character term suffix.
    pub fn term_code(&self) -> &str {
        &self.raw[STEM_LEN..]
    }

    /// Hierarchy level 1-5: the length of the leading non-dot run of the stem.
    pub fn level(&self) -> u8 {
        self.level
    }

    /// Event identity at the requested resolution.
    ///
    /// `FullCode` keys by the entire 7-character code. `Level3` keys by the
    /// first three stem characters; for codes above level 3 those include
    /// padding dots, so shallow codes form their own groups rather than
    /// erroring.
    pub fn event_key(&self, resolution: Resolution) -> EventKey {
        let key = match resolution {
            Resolution::FullCode => self.raw.clone(),
            Resolution::Level3 => self.raw[..3].to_string(),
        };
        EventKey { key, resolution }
    }
}

impl fmt::Display for Readcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl FromStr for Readcode {
    type Err = CodeError;

    /// Parses a code after trimming surrounding whitespace.
    ///
    /// Accepts exactly [`CODE_LEN`] characters from `[A-Za-z0-9.]` whose stem
    /// is a non-empty run of non-dot characters followed only by dot padding.
    fn from_str(text: &str) -> Result<Self, CodeError> {
        let trimmed = text.trim();
        let malformed = |reason| CodeError::MalformedCode {
            text: text.to_string(),
            reason,
        };
        if trimmed.len() != CODE_LEN {
            return Err(malformed("expected exactly 7 characters"));
        }
        if !trimmed
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.')
        {
            return Err(malformed("illegal character"));
        }
        let stem = &trimmed[..STEM_LEN];
        let significant = stem.bytes().take_while(|&b| b != b'.').count();
        if significant == 0 {
            return Err(malformed("stem starts with a dot"));
        }
        if stem.bytes().skip(significant).any(|b| b != b'.') {
            return Err(malformed("non-dot character after dot padding in stem"));
        }
        Ok(Readcode {
            raw: trimmed.to_string(),
            level: significant as u8,
        })
    }
}

/// Event aggregation granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Resolution {
    /// One event per distinct 7-character code.
    FullCode,
    /// Codes sharing the first three stem characters merge into one event.
    Level3,
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resolution::FullCode => f.write_str("full"),
            Resolution::Level3 => f.write_str("level3"),
        }
    }
}

/// Identity of one medical event at a fixed resolution.
///
/// Ordering is lexicographic on the key string, which fixes column order
/// everywhere downstream.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey {
    key: String,
    resolution: Resolution,
}

impl EventKey {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// The stem this key identifies: the first 5 characters of a full code,
    /// or the 3-character prefix itself at level-3 resolution.
    pub fn stem(&self) -> &str {
        match self.resolution {
            Resolution::FullCode => &self.key[..STEM_LEN],
            Resolution::Level3 => &self.key,
        }
    }

    /// The full code to look up in a dictionary: the raw code itself, or for
    /// a level-3 key the canonical code with dot-padded stem and "00" term
    /// (the form hierarchy tables list for a level-3 heading, e.g. "N24..00").
    fn dictionary_code(&self) -> String {
        match self.resolution {
            Resolution::FullCode => self.key.clone(),
            Resolution::Level3 => format!("{:.<width$}00", self.key, width = STEM_LEN),
        }
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

/// Map from full Read code to human-readable description.
///
/// Lookups never fail: unknown codes yield [`UNKNOWN_DESCRIPTION`], so the
/// detection pipeline runs with a partial dictionary or none at all.
#[derive(Debug, Default, Clone)]
pub struct CodeDictionary {
    entries: HashMap<String, String>,
    duplicate_rows: usize,
    malformed_rows: usize,
}

impl CodeDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a `code,description` CSV (no header, codes case-sensitive).
    ///
    /// Duplicate codes keep the first description; malformed rows are
    /// skipped. Both are counted so the caller can warn.
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let reader = BufReader::new(File::open(path)?);
        let mut dict = CodeDictionary::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            match line.split_once(',') {
                Some((code, description)) if Readcode::from_str(code).is_ok() => {
                    dict.insert(code.trim().to_string(), description.to_string());
                }
                _ => dict.malformed_rows += 1,
            }
        }
        Ok(dict)
    }

    pub fn insert(&mut self, code: String, description: String) {
        match self.entries.entry(code) {
            Entry::Occupied(_) => self.duplicate_rows += 1,
            Entry::Vacant(slot) => {
                slot.insert(description);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Duplicate rows ignored during load (first occurrence wins).
    pub fn duplicate_rows(&self) -> usize {
        self.duplicate_rows
    }

    /// Rows skipped during load because the code failed validation.
    pub fn malformed_rows(&self) -> usize {
        self.malformed_rows
    }

    /// Description for a full code, or [`UNKNOWN_DESCRIPTION`].
    pub fn describe_code(&self, code: &str) -> &str {
        self.entries
            .get(code)
            .map(String::as_str)
            .unwrap_or(UNKNOWN_DESCRIPTION)
    }

    /// Description for an event key, resolving level-3 keys through their
    /// canonical padded code.
    pub fn describe(&self, key: &EventKey) -> &str {
        self.describe_code(&key.dictionary_code())
    }
}

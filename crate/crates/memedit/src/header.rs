//! One-line `kind version key=value ...` headers shared by every artifact.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{FormatError, Result};

pub const VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub kind: String,
    /// Insertion order is kept when writing.
    fields: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn fields(&self) -> BTreeMap<&str, &str> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
    }

    pub fn line(&self) -> String {
        let mut s = format!("{} {VERSION}", self.kind);
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }

    /// Parses a header of the given kind; `path` is for messages only.
    pub fn parse(line: &str, kind: &str, path: &Path) -> Result<Self> {
        let mut it = line.trim_end_matches(['\r', '\n']).split(' ');
        let bad = |msg: String| FormatError::malformed(path, 1, msg);
        if it.next() != Some(kind) {
            return Err(bad(format!("not a {kind} file")));
        }
        match it.next() {
            Some(VERSION) => {}
            v => return Err(bad(format!("unsupported {kind} version {}", v.unwrap_or("")))),
        }
        let mut h = Header::new(kind);
        for kv in it.filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("header field {kv:?} is not key=value")))?;
            h.fields.push((k.into(), v.into()));
        }
        Ok(h)
    }

    pub fn require<T: FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.get(key).ok_or_else(|| FormatError::malformed(path, 1, format!("header lacks {key}")))?;
        v.parse().map_err(|_| FormatError::malformed(path, 1, format!("header field {key}={v} is invalid")))
    }
}

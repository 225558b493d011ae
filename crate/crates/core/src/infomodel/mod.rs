//! The information system: multi-valued attribute entries forming a
//! tree, the search filter language, per-resource snapshot generation
//! and the caching registry hierarchy.
//!
//! Every resource answers `QUERY /mds` with entry blocks serialized as
//!
//! ```text
//! dn: nordugrid-cluster-name=alpha,ou=dk,o=grid
//! nordugrid-cluster-name: alpha
//! objectclass: nordugrid-cluster
//! ```
//!
//! one block per entry, blank-line separated, attributes sorted, values
//! in insertion order. The `Filter` request header carries the query
//! filter, `Recurse` controls descent through registry children.

mod filter;
mod giis;
mod gris;

pub use filter::{parse_filter, Filter, FilterError};
pub use giis::{attach_to_parent, ChildKind, Giis, GiisConfig};
pub use gris::{gris_snapshot, rfc3339, ClusterState, JobInfo, QueueState};

use std::collections::BTreeMap;

use thiserror::Error;

pub const OC_CLUSTER: &str = "nordugrid-cluster";
pub const OC_SE: &str = "nordugrid-se";
pub const OC_RC: &str = "nordugrid-rc";
pub const OC_QUEUE: &str = "nordugrid-pbsqueue";
pub const OC_AUTHUSER: &str = "nordugrid-authuser";
pub const OC_JOB: &str = "nordugrid-pbsjob";
pub const OC_INFO_GROUP: &str = "nordugrid-info-group";

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("bad entry block: {0}")]
    BadEntry(String),
}

/// One record in the information tree: a distinguished name plus a map
/// from lowercase attribute names to ordered value lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub dn: String,
    pub attrs: BTreeMap<String, Vec<String>>,
}

impl Entry {
    pub fn new(dn: impl Into<String>, objectclass: &str) -> Self {
        let mut e = Entry {
            dn: dn.into(),
            attrs: BTreeMap::new(),
        };
        e.add("objectclass", objectclass);
        e
    }

    pub fn add(&mut self, attr: &str, value: impl Into<String>) {
        self.attrs
            .entry(attr.to_lowercase())
            .or_default()
            .push(value.into());
    }

    pub fn with(mut self, attr: &str, value: impl Into<String>) -> Self {
        self.add(attr, value);
        self
    }

    pub fn first(&self, attr: &str) -> Option<&str> {
        self.attrs
            .get(attr)
            .and_then(|vs| vs.first())
            .map(String::as_str)
    }

    pub fn objectclass(&self) -> Option<&str> {
        self.first("objectclass")
    }

    /// A u64 attribute value, defaulting to 0 when absent or unparsable.
    pub fn number(&self, attr: &str) -> u64 {
        self.first(attr).and_then(|v| v.parse().ok()).unwrap_or(0)
    }

    /// True when `parent` is this entry's dn suffix (the tree relation).
    pub fn is_under(&self, parent_dn: &str) -> bool {
        self.dn != parent_dn && self.dn.ends_with(&format!(",{parent_dn}"))
    }
}

/// Serializes entries bit-exactly for QUERY response bodies.
pub fn render_entries(entries: &[Entry]) -> String {
    let mut blocks = Vec::with_capacity(entries.len());
    for e in entries {
        let mut block = format!("dn: {}\n", e.dn);
        for (attr, values) in &e.attrs {
            for v in values {
                block.push_str(attr);
                block.push_str(": ");
                block.push_str(v);
                block.push('\n');
            }
        }
        blocks.push(block);
    }
    blocks.join("\n")
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>, InfoError> {
    let mut entries = Vec::new();
    for block in text.split("\n\n") {
        let block = block.trim_end_matches('\n');
        if block.is_empty() {
            continue;
        }
        let mut lines = block.lines();
        let first = lines.next().unwrap_or_default();
        let dn = first.strip_prefix("dn: ").ok_or_else(|| {
            InfoError::BadEntry(format!("block does not start with dn: {first:?}"))
        })?;
        let mut entry = Entry {
            dn: dn.to_string(),
            attrs: BTreeMap::new(),
        };
        for line in lines {
            let (attr, value) = line
                .split_once(": ")
                .ok_or_else(|| InfoError::BadEntry(format!("bad attribute line {line:?}")))?;
            entry.add(attr, value);
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Stable hex digest used to name per-user entries (FNV-1a 64).
pub fn dn_hash(dn: &str) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in dn.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

pub fn cluster_dn(name: &str, country: &str) -> String {
    format!("nordugrid-cluster-name={name},ou={country},o=grid")
}

pub fn se_dn(name: &str, country: &str) -> String {
    format!("nordugrid-se-name={name},ou={country},o=grid")
}

pub fn rc_dn(name: &str, country: &str) -> String {
    format!("nordugrid-rc-name={name},ou={country},o=grid")
}

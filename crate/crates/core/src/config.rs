//! Fleet configuration: one INI-style text file describes every service
//! of a testbed.
//!
//! ```text
//! [giis "dk"]
//! port = 39300
//! country = dk
//! ttl = 30
//!
//! [cluster "alpha"]
//! port = 39000
//! country = dk
//! parent_giis = dk
//! queues = short:600:512:1024:2 long:3600:1024:4096:2
//! gridmap = alpha.gridmap
//! rc = main
//!
//! [se "se1"]
//! port = 39100
//! country = dk
//! parent_giis = dk
//! acl = se1.acl
//!
//! [rc "main"]
//! port = 39200
//! country = dk
//! parent_giis = dk
//! writers = rc.writers
//! ```
//!
//! Sections are `[cluster "<name>"]`, `[se "<name>"]`, `[rc "<name>"]`
//! and `[giis "<name>"]`. Ports default per kind (cluster 39000,
//! se 39100, rc 39200, giis 39300), must be unique, and every `parent_giis`
//! must name a defined registry or be an external URL. Allowlists
//! (`gridmap`, `acl`, `writers`, `allow`) are files with one entry per
//! line, resolved relative to the config file; a missing key means
//! "allow any subject". Lines starting with `#` or `;` are comments.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::lrms::QueueConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn parse_err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
pub struct ClusterSection {
    pub name: String,
    pub port: u16,
    pub host: String,
    pub country: String,
    pub parent_giis: Option<String>,
    pub queues: Vec<QueueConfig>,
    pub gridmap: Vec<String>,
    pub runtime_environments: Vec<String>,
    pub local_se: Vec<PathBuf>,
    pub rc: Option<String>,
    pub ttl_s: u64,
    pub lifetime_s: u64,
    pub upload_timeout_s: u64,
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub tick_ms: u64,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SeSection {
    pub name: String,
    pub port: u16,
    pub host: String,
    pub country: String,
    pub parent_giis: Option<String>,
    pub acl: Vec<crate::se::AclRule>,
    pub capacity_mb: u64,
    pub root: Option<PathBuf>,
    pub ttl_s: u64,
}

#[derive(Debug, Clone)]
pub struct RcSection {
    pub name: String,
    pub port: u16,
    pub host: String,
    pub country: String,
    pub parent_giis: Option<String>,
    pub writers: Vec<String>,
    pub log: Option<PathBuf>,
    pub ttl_s: u64,
}

#[derive(Debug, Clone)]
pub struct GiisSection {
    pub name: String,
    pub port: u16,
    pub host: String,
    pub country: String,
    pub parent_giis: Option<String>,
    pub allow: Vec<String>,
    pub ttl_s: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FleetConfig {
    pub clusters: Vec<ClusterSection>,
    pub ses: Vec<SeSection>,
    pub rcs: Vec<RcSection>,
    pub giises: Vec<GiisSection>,
}

impl FleetConfig {
    pub fn giis(&self, name: &str) -> Option<&GiisSection> {
        self.giises.iter().find(|g| g.name == name)
    }

    pub fn rc(&self, name: &str) -> Option<&RcSection> {
        self.rcs.iter().find(|r| r.name == name)
    }

    /// `host:port` for a registry referenced by name or URL.
    pub fn giis_endpoint(&self, reference: &str) -> Option<String> {
        if reference.contains("://") || reference.contains(':') {
            return Some(reference.to_string());
        }
        self.giis(reference)
            .map(|g| format!("ng://{}:{}", g.host, g.port))
    }

    pub fn rc_endpoint(&self, reference: &str) -> Option<String> {
        if reference.contains("://") || reference.contains(':') {
            return Some(reference.to_string());
        }
        self.rc(reference)
            .map(|r| format!("ng://{}:{}", r.host, r.port))
    }
}

struct RawSection {
    kind: String,
    name: String,
    line: usize,
    keys: Vec<(usize, String, String)>,
}

impl RawSection {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.keys
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(line, _, v)| (*line, v.as_str()))
    }

    fn port(&self) -> Result<u16, ConfigError> {
        let default = match self.kind.as_str() {
            "cluster" => 39_000,
            "se" => 39_100,
            "rc" => 39_200,
            _ => 39_300,
        };
        match self.get("port") {
            Some((line, v)) => v
                .parse()
                .map_err(|_| parse_err(line, format!("bad port {v:?}"))),
            None => Ok(default),
        }
    }

    fn number(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            Some((line, v)) => v
                .parse()
                .map_err(|_| parse_err(line, format!("{key}: bad number {v:?}"))),
            None => Ok(default),
        }
    }

    fn string(&self, key: &str, default: &str) -> String {
        self.get(key)
            .map(|(_, v)| v.to_string())
            .unwrap_or_else(|| default.to_string())
    }

    fn optional(&self, key: &str) -> Option<String> {
        self.get(key).map(|(_, v)| v.to_string())
    }
}

fn split_sections(text: &str) -> Result<Vec<RawSection>, ConfigError> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| parse_err(lineno, "unterminated section header"))?
                .trim();
            let (kind, name) = match inner.split_once(' ') {
                Some((k, n)) => {
                    let n = n.trim().trim_matches('"');
                    (k.trim().to_string(), n.to_string())
                }
                None => (inner.to_string(), inner.to_string()),
            };
            if !matches!(kind.as_str(), "cluster" | "se" | "rc" | "giis") {
                return Err(parse_err(lineno, format!("unknown section kind {kind:?}")));
            }
            if name.is_empty() {
                return Err(parse_err(lineno, "section needs a name"));
            }
            sections.push(RawSection {
                kind,
                name,
                line: lineno,
                keys: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(lineno, format!("expected key = value, got {line:?}")))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| parse_err(lineno, "key outside any section"))?;
        section
            .keys
            .push((lineno, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(sections)
}

fn parse_queues(line: usize, text: &str) -> Result<Vec<QueueConfig>, ConfigError> {
    let mut queues = Vec::new();
    for spec in text.split_whitespace() {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 5 {
            return Err(parse_err(
                line,
                format!("queue spec {spec:?} is not name:cputime:memory:disk:cpus"),
            ));
        }
        let num = |i: usize| -> Result<u64, ConfigError> {
            parts[i].parse().map_err(|_| {
                parse_err(
                    line,
                    format!("queue spec {spec:?}: bad number {:?}", parts[i]),
                )
            })
        };
        let q = QueueConfig {
            name: parts[0].to_string(),
            max_cputime_s: num(1)?,
            max_memory_mb: num(2)?,
            max_disk_mb: num(3)?,
            cpus: num(4)?,
        };
        if q.name.is_empty()
            || q.max_cputime_s == 0
            || q.max_memory_mb == 0
            || q.max_disk_mb == 0
            || q.cpus == 0
        {
            return Err(parse_err(
                line,
                format!("queue spec {spec:?}: limits must be positive"),
            ));
        }
        queues.push(q);
    }
    if queues.is_empty() {
        return Err(parse_err(line, "queues key present but empty"));
    }
    Ok(queues)
}

fn read_allowlist(base: &Path, file: &str) -> Result<Vec<String>, ConfigError> {
    let path = base.join(file);
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

const ALLOW_ANY: &str = "/*";

fn allowlist(section: &RawSection, key: &str, base: &Path) -> Result<Vec<String>, ConfigError> {
    match section.get(key) {
        Some((_, file)) => read_allowlist(base, file),
        None => Ok(vec![ALLOW_ANY.to_string()]),
    }
}

/// Parses a fleet description; `base` anchors relative file references.
pub fn parse_fleet(text: &str, base: &Path) -> Result<FleetConfig, ConfigError> {
    let sections = split_sections(text)?;
    let mut fleet = FleetConfig::default();
    for s in &sections {
        let port = s.port()?;
        let host = s.string("host", &s.name);
        let country = s.string("country", "nowhere");
        let parent = s.optional("parent_giis");
        let ttl_s = s.number("ttl", 30)?;
        match s.kind.as_str() {
            "cluster" => {
                let (qline, qtext) = s.get("queues").ok_or_else(|| {
                    parse_err(s.line, format!("cluster {:?} needs queues", s.name))
                })?;
                fleet.clusters.push(ClusterSection {
                    name: s.name.clone(),
                    port,
                    host,
                    country,
                    parent_giis: parent,
                    queues: parse_queues(qline, qtext)?,
                    gridmap: allowlist(s, "gridmap", base)?,
                    runtime_environments: s
                        .optional("runtimeenvironments")
                        .map(|v| v.split_whitespace().map(str::to_string).collect())
                        .unwrap_or_default(),
                    local_se: s
                        .optional("local_se")
                        .map(|v| v.split_whitespace().map(PathBuf::from).collect())
                        .unwrap_or_default(),
                    rc: s.optional("rc"),
                    ttl_s,
                    lifetime_s: s.number("lifetime", 3_600)?,
                    upload_timeout_s: s.number("upload_timeout", 60)?,
                    retries: s.number("retries", 3)? as u32,
                    retry_backoff_ms: s.number("retry_backoff_ms", 1_000)?,
                    tick_ms: s.number("tick_ms", 100)?,
                    workdir: s.optional("workdir").map(PathBuf::from),
                });
            }
            "se" => {
                let acl = match s.get("acl") {
                    Some((line, file)) => {
                        let mut rules = Vec::new();
                        for entry in read_allowlist(base, file)? {
                            match crate::se::AclRule::parse(&entry) {
                                Some(rule) => rules.push(rule),
                                None => {
                                    return Err(parse_err(
                                        line,
                                        format!("bad acl line {entry:?} in {file}"),
                                    ))
                                }
                            }
                        }
                        rules
                    }
                    None => vec![crate::se::AclRule::parse(&format!("rw / {ALLOW_ANY}")).unwrap()],
                };
                fleet.ses.push(SeSection {
                    name: s.name.clone(),
                    port,
                    host,
                    country,
                    parent_giis: parent,
                    acl,
                    capacity_mb: s.number("capacity_mb", 1024)?,
                    root: s.optional("root").map(PathBuf::from),
                    ttl_s,
                });
            }
            "rc" => {
                fleet.rcs.push(RcSection {
                    name: s.name.clone(),
                    port,
                    host,
                    country,
                    parent_giis: parent,
                    writers: allowlist(s, "writers", base)?,
                    log: s.optional("log").map(PathBuf::from),
                    ttl_s,
                });
            }
            "giis" => {
                fleet.giises.push(GiisSection {
                    name: s.name.clone(),
                    port,
                    host,
                    country,
                    parent_giis: parent,
                    allow: allowlist(s, "allow", base)?,
                    ttl_s,
                });
            }
            _ => unreachable!("kind validated in split_sections"),
        }
    }
    validate(&fleet)?;
    Ok(fleet)
}

fn validate(fleet: &FleetConfig) -> Result<(), ConfigError> {
    let mut ports = BTreeSet::new();
    let mut names = BTreeSet::new();
    let all_sections: Vec<(&str, u16, &Option<String>)> = fleet
        .clusters
        .iter()
        .map(|c| (c.name.as_str(), c.port, &c.parent_giis))
        .chain(
            fleet
                .ses
                .iter()
                .map(|s| (s.name.as_str(), s.port, &s.parent_giis)),
        )
        .chain(
            fleet
                .rcs
                .iter()
                .map(|r| (r.name.as_str(), r.port, &r.parent_giis)),
        )
        .chain(
            fleet
                .giises
                .iter()
                .map(|g| (g.name.as_str(), g.port, &g.parent_giis)),
        )
        .collect();
    for (name, port, parent) in &all_sections {
        if !ports.insert(*port) {
            return Err(ConfigError::Invalid(format!("duplicate port {port}")));
        }
        if !names.insert(*name) {
            return Err(ConfigError::Invalid(format!(
                "duplicate service name {name:?}"
            )));
        }
        if let Some(parent) = parent {
            let external = parent.contains("://") || parent.contains(':');
            if !external && fleet.giis(parent).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "{name:?}: parent_giis {parent:?} names no defined giis"
                )));
            }
        }
    }
    Ok(())
}

//! The replica catalog: logical file names mapped to ordered lists of
//! physical URLs. Writes go through an append-only operation log that is
//! replayed at startup, so the service can be killed at any point and
//! come back with the same state.
//!
//! Wire interface: `REG` / `UNREG` / `LOOKUP` on target `/rc/<lfn>` with
//! the physical URL in the `Pfn` header; a LOOKUP response body is one
//! URL per line. The catalog also answers `QUERY /mds` with its own
//! registry entry.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::Mutex;

use thiserror::Error;

use crate::infomodel::{parse_filter, rc_dn, render_entries, Entry, Filter, OC_RC};
use crate::wire::{authorize, Request, Response, Service, ServiceRole, Subject, Verb};

#[derive(Debug, Error)]
pub enum RcError {
    #[error("subject not authorized to write")]
    Forbidden,
    #[error("unknown logical file name")]
    Unknown,
    #[error("invalid name: {0}")]
    Invalid(String),
    #[error("catalog log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct RcConfig {
    pub name: String,
    pub country: String,
    pub log_path: PathBuf,
    /// Subject patterns allowed to register and unregister.
    pub writers: Vec<String>,
    /// Advertised base URL, e.g. `ng://rc:39200`.
    pub base_url: String,
}

struct RcState {
    map: BTreeMap<String, Vec<String>>,
    log: File,
}

pub struct ReplicaCatalog {
    pub cfg: RcConfig,
    state: Mutex<RcState>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic())
}

impl ReplicaCatalog {
    /// Opens the catalog, replaying the operation log if present.
    pub fn open(cfg: RcConfig) -> Result<Self, RcError> {
        if let Some(parent) = cfg.log_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if cfg.log_path.exists() {
            let reader = BufReader::new(File::open(&cfg.log_path)?);
            for line in reader.lines() {
                let line = line?;
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("REG"), Some(lfn), Some(pfn)) => {
                        let pfns = map.entry(lfn.to_string()).or_default();
                        if !pfns.iter().any(|p| p == pfn) {
                            pfns.push(pfn.to_string());
                        }
                    }
                    (Some("UNREG"), Some(lfn), Some(pfn)) => {
                        if let Some(pfns) = map.get_mut(lfn) {
                            pfns.retain(|p| p != pfn);
                            if pfns.is_empty() {
                                map.remove(lfn);
                            }
                        }
                    }
                    _ => {
                        return Err(RcError::Invalid(format!("corrupt log line {line:?}")));
                    }
                }
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cfg.log_path)?;
        Ok(ReplicaCatalog {
            cfg,
            state: Mutex::new(RcState { map, log }),
        })
    }

    fn check_writer(&self, subject: &Subject) -> Result<(), RcError> {
        if authorize(subject, &self.cfg.writers) {
            Ok(())
        } else {
            Err(RcError::Forbidden)
        }
    }

    /// Appends the physical URL if absent (idempotent).
    pub fn register(&self, lfn: &str, pfn: &str, subject: &Subject) -> Result<(), RcError> {
        self.check_writer(subject)?;
        if !valid_name(lfn) || !valid_name(pfn) {
            return Err(RcError::Invalid(
                "lfn and pfn must be non-empty, no whitespace".into(),
            ));
        }
        let mut state = self.state.lock().unwrap();
        let pfns = state.map.entry(lfn.to_string()).or_default();
        if pfns.iter().any(|p| p == pfn) {
            return Ok(());
        }
        pfns.push(pfn.to_string());
        writeln!(state.log, "REG {lfn} {pfn}")?;
        state.log.flush()?;
        Ok(())
    }

    /// Removes the physical URL; removing an absent one is a no-op and
    /// the mapping disappears with its last URL.
    pub fn unregister(&self, lfn: &str, pfn: &str, subject: &Subject) -> Result<(), RcError> {
        self.check_writer(subject)?;
        let mut state = self.state.lock().unwrap();
        let Some(pfns) = state.map.get_mut(lfn) else {
            return Ok(());
        };
        let before = pfns.len();
        pfns.retain(|p| p != pfn);
        if pfns.len() == before {
            return Ok(());
        }
        if pfns.is_empty() {
            state.map.remove(lfn);
        }
        writeln!(state.log, "UNREG {lfn} {pfn}")?;
        state.log.flush()?;
        Ok(())
    }

    pub fn lookup(&self, lfn: &str) -> Result<Vec<String>, RcError> {
        self.state
            .lock()
            .unwrap()
            .map
            .get(lfn)
            .cloned()
            .ok_or(RcError::Unknown)
    }

    pub fn mappings(&self) -> BTreeMap<String, Vec<String>> {
        self.state.lock().unwrap().map.clone()
    }

    pub fn entry(&self) -> Entry {
        let mut e = Entry::new(rc_dn(&self.cfg.name, &self.cfg.country), OC_RC);
        e.add("nordugrid-rc-name", &self.cfg.name);
        e.add("nordugrid-rc-baseurl", &self.cfg.base_url);
        e
    }
}

fn lfn_of(target: &str) -> Option<&str> {
    target.strip_prefix("/rc/").filter(|l| !l.is_empty())
}

impl Service for ReplicaCatalog {
    fn role(&self) -> ServiceRole {
        ServiceRole::Rc
    }

    fn handle(&self, req: Request) -> Response {
        let subject = match req.subject() {
            Ok(s) => s,
            Err(e) => return Response::error(400, e.to_string()),
        };
        match req.verb {
            Verb::Query => {
                let filter = match req.headers.get("Filter").map(parse_filter) {
                    Some(Ok(f)) => f,
                    Some(Err(e)) => return Response::error(400, format!("bad filter: {e}")),
                    None => Filter::all(),
                };
                let entry = self.entry();
                let matched: Vec<Entry> = [entry].into_iter().filter(|e| filter.eval(e)).collect();
                Response::ok().with_body(render_entries(&matched))
            }
            Verb::Lookup => match lfn_of(&req.target) {
                Some(lfn) => match self.lookup(lfn) {
                    Ok(pfns) => {
                        let mut body = String::new();
                        for p in pfns {
                            body.push_str(&p);
                            body.push('\n');
                        }
                        Response::ok().with_body(body)
                    }
                    Err(RcError::Unknown) => Response::error(404, "unknown lfn"),
                    Err(e) => Response::error(500, e.to_string()),
                },
                None => Response::error(400, "target must be /rc/<lfn>"),
            },
            Verb::Reg | Verb::Unreg => {
                let Some(lfn) = lfn_of(&req.target) else {
                    return Response::error(400, "target must be /rc/<lfn>");
                };
                let Some(pfn) = req.headers.get("Pfn") else {
                    return Response::error(400, "missing Pfn header");
                };
                let result = if req.verb == Verb::Reg {
                    self.register(lfn, pfn, &subject)
                } else {
                    self.unregister(lfn, pfn, &subject)
                };
                match result {
                    Ok(()) => Response::ok(),
                    Err(RcError::Forbidden) => Response::error(403, "not a writer"),
                    Err(RcError::Invalid(m)) => Response::error(400, m),
                    Err(e) => Response::error(500, e.to_string()),
                }
            }
            other => Response::error(400, format!("verb {other} not served here")),
        }
    }
}

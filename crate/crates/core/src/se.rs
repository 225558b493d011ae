//! The stand-alone storage element: a file store behind the wire
//! protocol with per-subject, per-path-prefix access control.
//!
//! Served paths always resolve inside the configured root; any `..`,
//! absolute component or other traversal attempt is rejected before
//! touching the filesystem. Access is deny-by-default: a request is
//! allowed only when some ACL rule whose subject pattern and path prefix
//! both match grants the needed right, so removing a rule can never
//! widen access.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::infomodel::{parse_filter, render_entries, se_dn, Entry, Filter, OC_SE};
use crate::wire::{authorize, Request, Response, Service, ServiceRole, Subject, Verb};

#[derive(Debug, Error)]
pub enum SeError {
    #[error("path escapes the store root")]
    BadPath,
    #[error("access denied")]
    Forbidden,
    #[error("no such file")]
    NotFound,
    #[error("file exists; pass Overwrite: true to replace it")]
    Exists,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct AclRule {
    pub subject_pattern: String,
    /// `/` grants on everything; other prefixes match at component
    /// boundaries only.
    pub path_prefix: String,
    pub read: bool,
    pub write: bool,
}

impl AclRule {
    /// Parses `"<rights> <prefix> <subject pattern>"`, rights ⊆ {r,w}.
    /// The subject pattern comes last because distinguished names
    /// contain spaces.
    pub fn parse(line: &str) -> Option<AclRule> {
        let (rights, rest) = line.split_once(' ')?;
        let (prefix, subject) = rest.split_once(' ')?;
        if rights.is_empty() || !rights.chars().all(|c| c == 'r' || c == 'w') {
            return None;
        }
        if !prefix.starts_with('/') || subject.is_empty() {
            return None;
        }
        Some(AclRule {
            subject_pattern: subject.to_string(),
            path_prefix: prefix.to_string(),
            read: rights.contains('r'),
            write: rights.contains('w'),
        })
    }

    fn covers(&self, path: &str) -> bool {
        if self.path_prefix == "/" {
            return true;
        }
        path == self.path_prefix || path.starts_with(&format!("{}/", self.path_prefix))
    }
}

#[derive(Clone)]
pub struct SeConfig {
    pub name: String,
    pub country: String,
    pub root: PathBuf,
    pub acl: Vec<AclRule>,
    pub capacity_mb: u64,
    /// Advertised base URL, e.g. `ngse://se1:39100`.
    pub base_url: String,
}

pub struct StorageElement {
    pub cfg: SeConfig,
    // Serializes the exists-check in put so concurrent writers to one
    // path see 409 rather than interleaved content.
    write_lock: Mutex<()>,
}

impl StorageElement {
    pub fn new(cfg: SeConfig) -> std::io::Result<Self> {
        fs::create_dir_all(&cfg.root)?;
        Ok(StorageElement {
            cfg,
            write_lock: Mutex::new(()),
        })
    }

    /// Maps a request path onto the filesystem, refusing traversal.
    fn resolve(&self, path: &str) -> Result<PathBuf, SeError> {
        if !path.starts_with('/') {
            return Err(SeError::BadPath);
        }
        let rel = Path::new(path.trim_start_matches('/'));
        let mut out = self.cfg.root.clone();
        for comp in rel.components() {
            match comp {
                Component::Normal(c) => out.push(c),
                Component::CurDir => {}
                _ => return Err(SeError::BadPath),
            }
        }
        if out == self.cfg.root {
            return Err(SeError::BadPath);
        }
        Ok(out)
    }

    fn check(&self, subject: &Subject, path: &str, write: bool) -> Result<(), SeError> {
        let granted = self.cfg.acl.iter().any(|rule| {
            rule.covers(path)
                && authorize(subject, std::slice::from_ref(&rule.subject_pattern))
                && if write { rule.write } else { rule.read }
        });
        if granted {
            Ok(())
        } else {
            Err(SeError::Forbidden)
        }
    }

    pub fn put(
        &self,
        path: &str,
        bytes: &[u8],
        subject: &Subject,
        overwrite: bool,
    ) -> Result<(), SeError> {
        self.check(subject, path, true)?;
        let full = self.resolve(path)?;
        let _guard = self.write_lock.lock().unwrap();
        if full.exists() && !overwrite {
            return Err(SeError::Exists);
        }
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&full, bytes)?;
        Ok(())
    }

    pub fn get(&self, path: &str, subject: &Subject) -> Result<Vec<u8>, SeError> {
        self.check(subject, path, false)?;
        let full = self.resolve(path)?;
        if !full.is_file() {
            return Err(SeError::NotFound);
        }
        Ok(fs::read(&full)?)
    }

    pub fn del(&self, path: &str, subject: &Subject) -> Result<(), SeError> {
        self.check(subject, path, true)?;
        let full = self.resolve(path)?;
        if !full.is_file() {
            return Err(SeError::NotFound);
        }
        fs::remove_file(&full)?;
        Ok(())
    }

    pub fn stat(&self, path: &str, subject: &Subject) -> Result<u64, SeError> {
        self.check(subject, path, false)?;
        let full = self.resolve(path)?;
        if !full.is_file() {
            return Err(SeError::NotFound);
        }
        Ok(fs::metadata(&full)?.len())
    }

    /// Names and sizes under `prefix`, relative to it, sorted.
    pub fn list(&self, prefix: &str, subject: &Subject) -> Result<Vec<(String, u64)>, SeError> {
        self.check(subject, prefix, false)?;
        let full = if prefix == "/" {
            self.cfg.root.clone()
        } else {
            self.resolve(prefix.trim_end_matches('/'))?
        };
        let mut out = Vec::new();
        if full.is_dir() {
            walk(&full, &full, &mut out)?;
        } else if full.is_file() {
            out.push((
                full.file_name().unwrap().to_string_lossy().into_owned(),
                fs::metadata(&full)?.len(),
            ));
        }
        out.sort();
        Ok(out)
    }

    pub fn used_bytes(&self) -> u64 {
        let mut files = Vec::new();
        if walk(&self.cfg.root, &self.cfg.root, &mut files).is_err() {
            return 0;
        }
        files.iter().map(|(_, size)| size).sum()
    }

    pub fn free_mb(&self) -> u64 {
        self.cfg
            .capacity_mb
            .saturating_sub(self.used_bytes().div_ceil(1024 * 1024))
    }

    pub fn entry(&self) -> Entry {
        let mut e = Entry::new(se_dn(&self.cfg.name, &self.cfg.country), OC_SE);
        e.add("nordugrid-se-name", &self.cfg.name);
        e.add("nordugrid-se-baseurl", &self.cfg.base_url);
        e.add("nordugrid-se-freespace", self.free_mb().to_string());
        e.add("nordugrid-se-capacity", self.cfg.capacity_mb.to_string());
        e
    }
}

fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk(base, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(base)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            out.push((rel, entry.metadata()?.len()));
        }
    }
    Ok(())
}

fn se_response(err: SeError) -> Response {
    match err {
        SeError::BadPath => Response::error(400, "path escapes the store root"),
        SeError::Forbidden => Response::error(403, "access denied"),
        SeError::NotFound => Response::error(404, "no such file"),
        SeError::Exists => Response::error(409, "file exists; pass Overwrite: true"),
        SeError::Io(e) => Response::error(500, e.to_string()),
    }
}

impl Service for StorageElement {
    fn role(&self) -> ServiceRole {
        ServiceRole::Se
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
                let matched: Vec<Entry> = [self.entry()]
                    .into_iter()
                    .filter(|e| filter.eval(e))
                    .collect();
                Response::ok().with_body(render_entries(&matched))
            }
            Verb::Put => {
                let overwrite = req
                    .headers
                    .get("Overwrite")
                    .is_some_and(|v| v.eq_ignore_ascii_case("true"));
                match self.put(&req.target, &req.body, &subject, overwrite) {
                    Ok(()) => Response::ok(),
                    Err(e) => se_response(e),
                }
            }
            Verb::Get => match self.get(&req.target, &subject) {
                Ok(bytes) => Response::ok().with_body(bytes),
                Err(e) => se_response(e),
            },
            Verb::Del => match self.del(&req.target, &subject) {
                Ok(()) => Response::ok(),
                Err(e) => se_response(e),
            },
            Verb::Stat => match self.stat(&req.target, &subject) {
                Ok(size) => Response::ok().with_header("Size", size.to_string()),
                Err(e) => se_response(e),
            },
            Verb::List => match self.list(&req.target, &subject) {
                Ok(files) => {
                    let mut body = String::new();
                    for (name, size) in files {
                        body.push_str(&format!("{name} {size}\n"));
                    }
                    Response::ok().with_body(body)
                }
                Err(e) => se_response(e),
            },
            other => Response::error(400, format!("verb {other} not served here")),
        }
    }
}

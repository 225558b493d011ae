//! The aggregating registry: children (per-resource providers or other
//! registries) attach themselves and are queried on demand through a
//! per-child cache.
//!
//! A stale child is fetched at most once regardless of how many queries
//! race for it: the fetch lock serializes refreshes and late arrivals
//! re-check freshness before fetching. Readers always see either the old
//! snapshot or the complete new one. A child that stops re-attaching for
//! three of its ttl periods is pruned; a child that fails a fetch is
//! skipped and the response is marked partial.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::clock::Clock;
use crate::wire::{
    authorize, Client, Request, Response, Service, ServiceRole, Subject, Verb, WireError,
};

use super::{parse_entries, render_entries, Entry, Filter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildKind {
    Gris,
    Giis,
}

impl ChildKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChildKind::Gris => "gris",
            ChildKind::Giis => "giis",
        }
    }

    pub fn parse(s: &str) -> Option<ChildKind> {
        match s {
            "gris" => Some(ChildKind::Gris),
            "giis" => Some(ChildKind::Giis),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct GiisConfig {
    pub name: String,
    pub country: String,
    /// Cache ttl assigned to newly attached children, milliseconds.
    pub default_ttl_ms: u64,
    /// Subject patterns allowed to ATTACH.
    pub allow: Vec<String>,
    pub subject: Subject,
}

struct ChildCache {
    fetched_at: Option<u64>,
    entries: Arc<Vec<Entry>>,
}

struct Child {
    endpoint: String,
    kind: ChildKind,
    ttl_ms: u64,
    registered_at: AtomicU64,
    fetches: AtomicU64,
    cache: RwLock<ChildCache>,
    fetch_lock: Mutex<()>,
}

impl Child {
    fn fresh_entries(&self, now: u64) -> Option<Arc<Vec<Entry>>> {
        let cache = self.cache.read().unwrap();
        match cache.fetched_at {
            Some(at) if now.saturating_sub(at) < self.ttl_ms => Some(cache.entries.clone()),
            _ => None,
        }
    }
}

pub struct Giis {
    pub cfg: GiisConfig,
    clock: Arc<dyn Clock>,
    client: Client,
    children: RwLock<Vec<Arc<Child>>>,
}

impl Giis {
    pub fn new(cfg: GiisConfig, clock: Arc<dyn Clock>, client: Client) -> Self {
        Giis {
            cfg,
            clock,
            client,
            children: RwLock::new(Vec::new()),
        }
    }

    /// Registers a child (idempotent on the endpoint).
    pub fn attach(&self, endpoint: &str, kind: ChildKind, ttl_ms: Option<u64>) {
        let now = self.clock.now_ms();
        self.prune(now);
        let children = self.children.read().unwrap();
        if let Some(child) = children.iter().find(|c| c.endpoint == endpoint) {
            child.registered_at.store(now, Ordering::SeqCst);
            return;
        }
        drop(children);
        let mut children = self.children.write().unwrap();
        if children.iter().any(|c| c.endpoint == endpoint) {
            return;
        }
        children.push(Arc::new(Child {
            endpoint: endpoint.to_string(),
            kind,
            ttl_ms: ttl_ms.unwrap_or(self.cfg.default_ttl_ms),
            registered_at: AtomicU64::new(now),
            fetches: AtomicU64::new(0),
            cache: RwLock::new(ChildCache {
                fetched_at: None,
                entries: Arc::new(Vec::new()),
            }),
            fetch_lock: Mutex::new(()),
        }));
    }

    /// Drops children that have not re-attached within 3 ttl periods.
    fn prune(&self, now: u64) {
        let mut children = self.children.write().unwrap();
        children
            .retain(|c| now.saturating_sub(c.registered_at.load(Ordering::SeqCst)) < 3 * c.ttl_ms);
    }

    pub fn children_list(&self) -> Vec<(String, ChildKind)> {
        self.prune(self.clock.now_ms());
        self.children
            .read()
            .unwrap()
            .iter()
            .map(|c| (c.endpoint.clone(), c.kind))
            .collect()
    }

    /// Upstream fetch count per child endpoint.
    pub fn fetch_counts(&self) -> Vec<(String, u64)> {
        self.children
            .read()
            .unwrap()
            .iter()
            .map(|c| (c.endpoint.clone(), c.fetches.load(Ordering::SeqCst)))
            .collect()
    }

    /// Answers a query from per-child caches, refreshing stale ones.
    /// Returns the matching entries and whether any child was skipped.
    pub fn query(&self, filter: &Filter, recurse: bool) -> (Vec<Entry>, bool) {
        let now = self.clock.now_ms();
        self.prune(now);
        let children: Vec<Arc<Child>> = self.children.read().unwrap().clone();
        let mut out: Vec<Entry> = Vec::new();
        let mut seen_dns = std::collections::BTreeSet::new();
        let mut partial = false;
        for child in children {
            if child.kind == ChildKind::Giis && !recurse {
                continue;
            }
            let entries = match self.ensure_fresh(&child) {
                Ok(entries) => entries,
                Err(_) => {
                    partial = true;
                    continue;
                }
            };
            for e in entries.iter() {
                if filter.eval(e) && seen_dns.insert(e.dn.clone()) {
                    out.push(e.clone());
                }
            }
        }
        (out, partial)
    }

    /// Serves the child's cache, fetching its whole subtree if stale.
    /// Concurrent callers coalesce onto one in-flight fetch per child.
    fn ensure_fresh(&self, child: &Child) -> Result<Arc<Vec<Entry>>, WireError> {
        if let Some(entries) = child.fresh_entries(self.clock.now_ms()) {
            return Ok(entries);
        }
        let _guard = child.fetch_lock.lock().unwrap();
        if let Some(entries) = child.fresh_entries(self.clock.now_ms()) {
            return Ok(entries);
        }
        child.fetches.fetch_add(1, Ordering::SeqCst);
        let req = self
            .client
            .request(Verb::Query, "/mds")
            .with_header("Filter", Filter::all().to_text())
            .with_header("Recurse", "true");
        let result = self.client.call(&child.endpoint, req).and_then(|resp| {
            if !resp.is_ok() {
                return Err(WireError::Unreachable(child.endpoint.clone()));
            }
            let text = String::from_utf8_lossy(&resp.body).into_owned();
            parse_entries(&text).map_err(|_| WireError::Unreachable(child.endpoint.clone()))
        });
        let mut cache = child.cache.write().unwrap();
        match result {
            Ok(entries) => {
                cache.entries = Arc::new(entries);
                cache.fetched_at = Some(self.clock.now_ms());
                Ok(cache.entries.clone())
            }
            Err(e) => {
                cache.fetched_at = None;
                Err(e)
            }
        }
    }

    fn handle_query(&self, req: &Request) -> Response {
        let filter = match req.headers.get("Filter") {
            Some(text) => match super::parse_filter(text) {
                Ok(f) => f,
                Err(e) => return Response::error(400, format!("bad filter: {e}")),
            },
            None => Filter::all(),
        };
        let recurse = req
            .headers
            .get("Recurse")
            .is_some_and(|v| v.eq_ignore_ascii_case("true"));
        let (entries, partial) = self.query(&filter, recurse);
        let mut resp = Response::ok().with_body(render_entries(&entries));
        if partial {
            resp.headers.set("Partial", "true");
        }
        resp
    }

    fn handle_attach(&self, req: &Request) -> Response {
        let subject = match req.subject() {
            Ok(s) => s,
            Err(e) => return Response::error(400, e.to_string()),
        };
        if !authorize(&subject, &self.cfg.allow) {
            return Response::error(403, "subject not allowed to attach");
        }
        let endpoint = match req.headers.get("Endpoint") {
            Some(e) if !e.is_empty() => e.to_string(),
            _ => return Response::error(400, "missing Endpoint header"),
        };
        let kind = match req.headers.get("Kind").and_then(ChildKind::parse) {
            Some(k) => k,
            None => return Response::error(400, "Kind header must be gris or giis"),
        };
        let ttl_ms = req
            .headers
            .get("Ttl")
            .and_then(|v| v.parse::<u64>().ok())
            .map(|s| s * 1_000);
        self.attach(&endpoint, kind, ttl_ms);
        Response::ok()
    }
}

impl Service for Giis {
    fn role(&self) -> ServiceRole {
        ServiceRole::Giis
    }

    fn handle(&self, req: Request) -> Response {
        match req.verb {
            Verb::Query => self.handle_query(&req),
            Verb::Attach => self.handle_attach(&req),
            Verb::Children => {
                let mut body = String::new();
                for (endpoint, kind) in self.children_list() {
                    body.push_str(kind.as_str());
                    body.push(' ');
                    body.push_str(&endpoint);
                    body.push('\n');
                }
                Response::ok().with_body(body)
            }
            other => Response::error(400, format!("verb {other} not served here")),
        }
    }
}

/// Registers `endpoint` with a parent registry; services call this at
/// boot and then once per registration period.
pub fn attach_to_parent(
    client: &Client,
    parent: &str,
    endpoint: &str,
    kind: ChildKind,
    ttl_s: Option<u64>,
) -> Result<(), WireError> {
    let mut req = client
        .request(Verb::Attach, "/mds")
        .with_header("Endpoint", endpoint)
        .with_header("Kind", kind.as_str());
    if let Some(s) = ttl_s {
        req = req.with_header("Ttl", s.to_string());
    }
    let resp = client.call(parent, req)?;
    if resp.is_ok() {
        Ok(())
    } else {
        Err(WireError::Unreachable(format!(
            "{parent}: attach refused: {} {}",
            resp.code, resp.reason
        )))
    }
}

//! The client-side library: resource discovery through the registry
//! hierarchy, replica resolution, feasibility matching and ranking,
//! submission with input upload, monitoring through the information
//! system, output retrieval and job control.
//!
//! The broker lives here, next to the user, not on a central service:
//! every candidate is matched locally against the discovered snapshot
//! and data flows only between this client, the chosen cluster and the
//! storage elements.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::infomodel::{parse_entries, Entry, OC_AUTHUSER, OC_CLUSTER, OC_QUEUE};
use crate::wire::{authorize, Client, Response, Subject, Verb, WireError};
use crate::xrsl::{self, Action, JobDescription};

#[derive(Debug, Error)]
pub enum UiError {
    #[error("unresolved input {0}")]
    UnresolvedInput(String),
    #[error("no feasible resource")]
    NoFeasibleResource,
    #[error("job {0} is not known to the information system")]
    UnknownJob(String),
    #[error("{context}: {code} {reason}")]
    Remote {
        context: String,
        code: u16,
        reason: String,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("{0}")]
    Invalid(String),
}

fn remote_err(context: &str, resp: &Response) -> UiError {
    UiError::Remote {
        context: context.to_string(),
        code: resp.code,
        reason: resp.reason.clone(),
    }
}

/// A cluster as reassembled from discovery entries.
#[derive(Debug, Clone)]
pub struct ClusterView {
    pub dn: String,
    pub name: String,
    pub contact: String,
    pub total_cpus: u64,
    pub free_cpus: u64,
    pub runtime_environments: Vec<String>,
    pub local_se_paths: Vec<String>,
    /// Subject patterns gathered from the authorized-user entries.
    pub authusers: Vec<String>,
    pub queues: Vec<QueueView>,
}

#[derive(Debug, Clone)]
pub struct QueueView {
    pub dn: String,
    pub name: String,
    pub max_cputime_s: u64,
    pub max_memory_mb: u64,
    pub max_disk_mb: u64,
    pub running: u64,
    pub queued: u64,
    /// Per-user view from the caller's authuser entry, when present.
    pub user_free_cpus: Option<u64>,
    pub user_queue_length: Option<u64>,
}

impl QueueView {
    pub fn effective_queue_length(&self) -> u64 {
        self.user_queue_length.unwrap_or(self.queued)
    }
}

/// One (cluster, queue) pair with its feasibility verdict.
#[derive(Debug, Clone)]
pub struct ResourceCandidate {
    pub cluster: ClusterView,
    pub queue: QueueView,
    pub rejection_reasons: Vec<String>,
}

impl ResourceCandidate {
    pub fn feasible(&self) -> bool {
        self.rejection_reasons.is_empty()
    }

    /// More free CPUs first, then shorter effective queue, then names.
    pub fn rank_key(&self) -> (std::cmp::Reverse<u64>, u64, String, String) {
        (
            std::cmp::Reverse(self.cluster.free_cpus),
            self.queue.effective_queue_length(),
            self.cluster.name.clone(),
            self.queue.name.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedInput {
    pub name: String,
    pub chosen_pfn: String,
    pub alternatives: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Discovery {
    pub clusters: Vec<ClusterView>,
    /// True when some registry child was skipped (stale or dead).
    pub partial: bool,
}

/// One user's session context.
pub struct Ui {
    pub client: Client,
    pub giis: String,
}

impl Ui {
    pub fn new(client: Client, giis: impl Into<String>) -> Self {
        Ui {
            client,
            giis: giis.into(),
        }
    }

    pub fn subject(&self) -> &Subject {
        &self.client.subject
    }

    fn query_is(&self, endpoint: &str, filter: &str) -> Result<(Vec<Entry>, bool), UiError> {
        let req = self
            .client
            .request(Verb::Query, "/mds")
            .with_header("Filter", filter)
            .with_header("Recurse", "true");
        let resp = self.client.call(endpoint, req)?;
        if !resp.is_ok() {
            return Err(remote_err("information query", &resp));
        }
        let partial = resp
            .headers
            .get("Partial")
            .is_some_and(|v| v.eq_ignore_ascii_case("true"));
        let text = String::from_utf8_lossy(&resp.body).into_owned();
        let entries = parse_entries(&text).map_err(|e| UiError::Invalid(e.to_string()))?;
        Ok((entries, partial))
    }

    /// Finds every cluster and queue (plus the caller-relevant authorized
    /// user entries) below the registry and reassembles the tree by dn
    /// suffix.
    pub fn discover(&self) -> Result<Discovery, UiError> {
        let filter = format!(
            "(|(objectclass={OC_CLUSTER})(objectclass={OC_QUEUE})(objectclass={OC_AUTHUSER}))"
        );
        let (entries, partial) = self.query_is(&self.giis, &filter)?;
        Ok(Discovery {
            clusters: assemble_clusters(&entries),
            partial,
        })
    }

    /// Replaces each `rc:<lfn>` input source by the first registered
    /// physical URL.
    pub fn resolve_inputs(
        &self,
        job: &JobDescription,
        rc: &str,
    ) -> Result<(JobDescription, Vec<ResolvedInput>), UiError> {
        let mut rewritten = job.clone();
        let mut resolved = Vec::new();
        for f in rewritten.inputfiles.iter_mut() {
            let Some(lfn) = f.url.strip_prefix("rc:") else {
                continue;
            };
            let req = self.client.request(Verb::Lookup, format!("/rc/{lfn}"));
            let resp = self.client.call(rc, req)?;
            if resp.code == 404 {
                return Err(UiError::UnresolvedInput(lfn.to_string()));
            }
            if !resp.is_ok() {
                return Err(remote_err("replica lookup", &resp));
            }
            let alternatives: Vec<String> = String::from_utf8_lossy(&resp.body)
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            let Some(first) = alternatives.first().cloned() else {
                return Err(UiError::UnresolvedInput(lfn.to_string()));
            };
            f.url = first.clone();
            resolved.push(ResolvedInput {
                name: f.name.clone(),
                chosen_pfn: first,
                alternatives,
            });
        }
        Ok((rewritten, resolved))
    }

    /// Submits the job to the chosen candidate and uploads the
    /// user-supplied inputs; a failed upload cancels the job best-effort.
    pub fn submit(
        &self,
        job: &JobDescription,
        target: &ResourceCandidate,
        local_files: &BTreeMap<String, Vec<u8>>,
    ) -> Result<String, UiError> {
        let mut job = job.clone();
        if job.queue.is_empty() {
            job.queue = target.queue.name.clone();
        }
        let body = xrsl::serialize(&job);
        let req = self
            .client
            .request(Verb::Submit, "/jobs")
            .with_body(body.into_bytes());
        let resp = self.client.call(&target.cluster.contact, req)?;
        if !resp.is_ok() {
            return Err(remote_err("submit", &resp));
        }
        let gridid = resp
            .headers
            .get("GridId")
            .ok_or_else(|| UiError::Invalid("submit response lacked a GridId".into()))?
            .to_string();

        for f in job.inputfiles.iter().filter(|f| f.url.is_empty()) {
            let Some(bytes) = local_files.get(&f.name) else {
                let _ = self.control(&gridid, &target.cluster.contact, Action::Cancel);
                return Err(UiError::Invalid(format!(
                    "no local content for input {}",
                    f.name
                )));
            };
            let req = self
                .client
                .request(Verb::Put, format!("/sessions/{gridid}/{}", f.name))
                .with_body(bytes.clone());
            match self.client.call(&target.cluster.contact, req) {
                Ok(resp) if resp.is_ok() => {}
                outcome => {
                    let _ = self.control(&gridid, &target.cluster.contact, Action::Cancel);
                    return match outcome {
                        Ok(resp) => Err(remote_err("upload", &resp)),
                        Err(e) => Err(e.into()),
                    };
                }
            }
        }
        Ok(gridid)
    }

    /// The job's state as the information system reports it; `UNKNOWN`
    /// once (or before) it is not visible.
    pub fn status(&self, gridid: &str) -> Result<String, UiError> {
        let filter =
            format!("(&(objectclass=nordugrid-pbsjob)(nordugrid-pbsjob-globalid={gridid}))");
        let (entries, _) = self.query_is(&self.giis, &filter)?;
        Ok(entries
            .first()
            .and_then(|e| e.first("nordugrid-pbsjob-status"))
            .unwrap_or("UNKNOWN")
            .to_string())
    }

    /// All of the caller's jobs as (gridid, state) pairs.
    pub fn my_jobs(&self) -> Result<Vec<(String, String)>, UiError> {
        let filter = format!(
            "(&(objectclass=nordugrid-pbsjob)(nordugrid-pbsjob-globalowner={}))",
            self.subject().dn()
        );
        let (entries, _) = self.query_is(&self.giis, &filter)?;
        Ok(entries
            .iter()
            .filter_map(|e| {
                Some((
                    e.first("nordugrid-pbsjob-globalid")?.to_string(),
                    e.first("nordugrid-pbsjob-status")?.to_string(),
                ))
            })
            .collect())
    }

    /// Locates the cluster serving `gridid` via the information system.
    pub fn locate_job(&self, gridid: &str) -> Result<String, UiError> {
        let filter = format!(
            "(|(objectclass={OC_CLUSTER})(&(objectclass=nordugrid-pbsjob)(nordugrid-pbsjob-globalid={gridid})))"
        );
        let (entries, _) = self.query_is(&self.giis, &filter)?;
        let job = entries
            .iter()
            .find(|e| e.first("nordugrid-pbsjob-globalid") == Some(gridid))
            .ok_or_else(|| UiError::UnknownJob(gridid.to_string()))?;
        entries
            .iter()
            .filter(|e| e.objectclass() == Some(OC_CLUSTER))
            .find(|c| job.is_under(&c.dn))
            .and_then(|c| c.first("nordugrid-cluster-contactstring"))
            .map(str::to_string)
            .ok_or_else(|| UiError::UnknownJob(gridid.to_string()))
    }

    /// Downloads every retained output into `destdir`; returns the names.
    pub fn fetch_outputs(
        &self,
        gridid: &str,
        cluster: &str,
        destdir: &Path,
    ) -> Result<Vec<String>, UiError> {
        let req = self
            .client
            .request(Verb::List, format!("/sessions/{gridid}"));
        let resp = self.client.call(cluster, req)?;
        if !resp.is_ok() {
            return Err(remote_err("list outputs", &resp));
        }
        let listing = String::from_utf8_lossy(&resp.body).into_owned();
        std::fs::create_dir_all(destdir).map_err(|e| UiError::Invalid(e.to_string()))?;
        let mut fetched = Vec::new();
        for line in listing.lines() {
            let Some((name, _size)) = line.rsplit_once(' ') else {
                continue;
            };
            let req = self
                .client
                .request(Verb::Get, format!("/sessions/{gridid}/{name}"));
            let resp = self.client.call(cluster, req)?;
            if !resp.is_ok() {
                return Err(remote_err("download output", &resp));
            }
            let dest = destdir.join(name);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(|e| UiError::Invalid(e.to_string()))?;
            }
            std::fs::write(&dest, &resp.body).map_err(|e| UiError::Invalid(e.to_string()))?;
            fetched.push(name.to_string());
        }
        Ok(fetched)
    }

    /// Sends the control request with the action attribute set.
    pub fn control(&self, gridid: &str, cluster: &str, action: Action) -> Result<(), UiError> {
        let verb = match action {
            Action::Cancel => Verb::Cancel,
            Action::Clean => Verb::Clean,
            Action::Submit => {
                return Err(UiError::Invalid("submit is not a control action".into()))
            }
        };
        let control_job = JobDescription {
            action,
            ..Default::default()
        };
        let req = self
            .client
            .request(verb, "/jobs")
            .with_header("GridId", gridid)
            .with_body(xrsl::serialize(&control_job).into_bytes());
        let resp = self.client.call(cluster, req)?;
        if resp.is_ok() {
            Ok(())
        } else {
            Err(remote_err("control", &resp))
        }
    }

    pub fn cancel(&self, gridid: &str) -> Result<(), UiError> {
        let cluster = self.locate_job(gridid)?;
        self.control(gridid, &cluster, Action::Cancel)
    }

    pub fn clean(&self, gridid: &str) -> Result<(), UiError> {
        let cluster = self.locate_job(gridid)?;
        self.control(gridid, &cluster, Action::Clean)
    }
}

fn assemble_clusters(entries: &[Entry]) -> Vec<ClusterView> {
    let mut clusters: Vec<ClusterView> = entries
        .iter()
        .filter(|e| e.objectclass() == Some(OC_CLUSTER))
        .map(|e| ClusterView {
            dn: e.dn.clone(),
            name: e
                .first("nordugrid-cluster-name")
                .unwrap_or_default()
                .to_string(),
            contact: e
                .first("nordugrid-cluster-contactstring")
                .unwrap_or_default()
                .to_string(),
            total_cpus: e.number("nordugrid-cluster-totalcpus"),
            free_cpus: e.number("nordugrid-cluster-freecpus"),
            runtime_environments: e
                .attrs
                .get("nordugrid-cluster-runtimeenvironment")
                .cloned()
                .unwrap_or_default(),
            local_se_paths: e
                .attrs
                .get("nordugrid-cluster-localse")
                .cloned()
                .unwrap_or_default(),
            authusers: Vec::new(),
            queues: Vec::new(),
        })
        .collect();
    clusters.sort_by(|a, b| a.name.cmp(&b.name));

    for cluster in clusters.iter_mut() {
        let mut queues: Vec<QueueView> = entries
            .iter()
            .filter(|e| e.objectclass() == Some(OC_QUEUE) && e.is_under(&cluster.dn))
            .map(|e| QueueView {
                dn: e.dn.clone(),
                name: e
                    .first("nordugrid-pbsqueue-name")
                    .unwrap_or_default()
                    .to_string(),
                max_cputime_s: e.number("nordugrid-pbsqueue-maxcputime"),
                max_memory_mb: e.number("nordugrid-pbsqueue-maxmemory"),
                max_disk_mb: e.number("nordugrid-pbsqueue-maxdisk"),
                running: e.number("nordugrid-pbsqueue-running"),
                queued: e.number("nordugrid-pbsqueue-queued"),
                user_free_cpus: None,
                user_queue_length: None,
            })
            .collect();
        queues.sort_by(|a, b| a.name.cmp(&b.name));

        for queue in queues.iter_mut() {
            for user in entries
                .iter()
                .filter(|e| e.objectclass() == Some(OC_AUTHUSER) && e.is_under(&queue.dn))
            {
                if let Some(name) = user.first("nordugrid-authuser-name") {
                    if !cluster.authusers.iter().any(|p| p == name) {
                        cluster.authusers.push(name.to_string());
                    }
                }
                if queue.user_free_cpus.is_none() {
                    queue.user_free_cpus = Some(user.number("nordugrid-authuser-freecpus"));
                    queue.user_queue_length = Some(user.number("nordugrid-authuser-queuelength"));
                }
            }
        }
        cluster.queues = queues;
    }
    clusters
}

/// Applies the six feasibility predicates to every (cluster, queue) pair
/// and ranks the survivors. Every rejection names the failed
/// requirement.
pub fn match_candidates(
    job: &JobDescription,
    clusters: &[ClusterView],
    subject: &Subject,
) -> Vec<ResourceCandidate> {
    let mut out = Vec::new();
    for cluster in clusters {
        for queue in &cluster.queues {
            let mut reasons = Vec::new();
            if job.cputime_s > queue.max_cputime_s {
                reasons.push("cputime".to_string());
            }
            if job.memory_mb > queue.max_memory_mb {
                reasons.push("memory".to_string());
            }
            if job.disk_mb > queue.max_disk_mb {
                reasons.push("disk".to_string());
            }
            if !job
                .runtime_environments
                .iter()
                .all(|rte| cluster.runtime_environments.iter().any(|have| have == rte))
            {
                reasons.push("runtimeenvironment".to_string());
            }
            if !job.queue.is_empty() && job.queue != queue.name {
                reasons.push("queue".to_string());
            }
            if !authorize(subject, &cluster.authusers) {
                reasons.push("user".to_string());
            }
            out.push(ResourceCandidate {
                cluster: cluster.clone(),
                queue: queue.clone(),
                rejection_reasons: reasons,
            });
        }
    }
    out.sort_by(|a, b| {
        a.feasible()
            .cmp(&b.feasible())
            .reverse()
            .then_with(|| a.rank_key().cmp(&b.rank_key()))
    });
    out
}

/// The feasible candidates in rank order.
pub fn feasible(candidates: &[ResourceCandidate]) -> Vec<&ResourceCandidate> {
    candidates.iter().filter(|c| c.feasible()).collect()
}

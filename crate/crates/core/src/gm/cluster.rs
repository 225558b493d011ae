//! The cluster front-end process: gatekeeper, grid manager executor,
//! local scheduler and information provider behind one endpoint.
//!
//! The executor (`pump_once`) advances each job one step at a time. A
//! step snapshots the record under the state lock, performs any network
//! transfers with the lock released, and re-applies the outcome through
//! the transition table — so a cancel that lands mid-transfer simply
//! wins, and the stale outcome becomes a no-op. Worker slots execute
//! scripts that see nothing but their session directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::clock::Clock;
use crate::infomodel::{
    gris_snapshot, parse_filter, render_entries, rfc3339, ClusterState, Entry, Filter, JobInfo,
    QueueState, OC_JOB,
};
use crate::lrms::{LocalState, Lrms, QueueConfig};
use crate::wire::{
    authorize, split_endpoint, Client, Request, Response, Service, ServiceRole, Subject, Verb,
};
use crate::xrsl::{self, Action, JobDescription};

use super::{next_state, JobEvent, JobRecord, JobState, StatusDir};

const MB: u64 = 1024 * 1024;

#[derive(Clone)]
pub struct ClusterConfig {
    pub name: String,
    pub country: String,
    /// Advertised gatekeeper URL, e.g. `ng://alpha:39000`.
    pub contact: String,
    /// Identity used for the cluster's own outbound calls.
    pub subject: Subject,
    pub queues: Vec<QueueConfig>,
    /// Subject patterns admitted by the gatekeeper.
    pub gridmap: Vec<String>,
    pub runtime_environments: Vec<String>,
    /// Directory prefixes of locally mounted storage, usable via `file:`
    /// input sources.
    pub local_se_paths: Vec<PathBuf>,
    pub control_dir: PathBuf,
    pub sessions_dir: PathBuf,
    pub rc_endpoint: Option<String>,
    pub parent_giis: Option<String>,
    pub registration_ttl_s: u64,
    pub default_lifetime_s: u64,
    pub upload_timeout_s: u64,
    pub stage_retries: u32,
    pub retry_backoff_ms: u64,
    pub aliases: Vec<String>,
}

impl ClusterConfig {
    /// Desk-scale defaults; directories under `base`.
    pub fn new(name: &str, country: &str, base: &Path) -> Self {
        ClusterConfig {
            name: name.to_string(),
            country: country.to_string(),
            contact: format!("ng://{name}:39000"),
            subject: Subject::new(format!("/O=Grid/CN=cluster-{name}"))
                .expect("cluster subject is well-formed"),
            queues: Vec::new(),
            gridmap: Vec::new(),
            runtime_environments: Vec::new(),
            local_se_paths: Vec::new(),
            control_dir: base.join("control"),
            sessions_dir: base.join("sessions"),
            rc_endpoint: None,
            parent_giis: None,
            registration_ttl_s: 30,
            default_lifetime_s: 3_600,
            upload_timeout_s: 60,
            stage_retries: 3,
            retry_backoff_ms: 1_000,
            aliases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum GmEvent {
    Transition {
        gridid: String,
        from: JobState,
        to: JobState,
    },
    StageInFile {
        gridid: String,
        name: String,
    },
    Qsub {
        gridid: String,
        local_id: u64,
    },
    StageOutFile {
        gridid: String,
        name: String,
    },
    RcRegistered {
        gridid: String,
        lfn: String,
        pfn: String,
    },
}

struct GmInner {
    records: std::collections::BTreeMap<String, JobRecord>,
    counter: u64,
    events: Vec<GmEvent>,
}

pub struct Cluster {
    pub cfg: Arc<ClusterConfig>,
    clock: Arc<dyn Clock>,
    pub lrms: Arc<Lrms>,
    client: Client,
    status: StatusDir,
    state: Mutex<GmInner>,
    mds_queries: AtomicU64,
    last_attach_ms: AtomicU64,
}

/// A relative path that stays inside its directory: no `..`, no
/// absolutes, no empty names.
fn safe_relpath(name: &str) -> bool {
    if name.is_empty() || name.starts_with('/') {
        return false;
    }
    Path::new(name)
        .components()
        .all(|c| matches!(c, Component::Normal(_)))
}

fn free_bytes(path: &Path) -> u64 {
    use std::os::unix::ffi::OsStrExt;
    let Ok(cpath) = std::ffi::CString::new(path.as_os_str().as_bytes()) else {
        return u64::MAX;
    };
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    if unsafe { libc::statvfs(cpath.as_ptr(), &mut st) } == 0 {
        st.f_bavail as u64 * st.f_frsize as u64
    } else {
        u64::MAX
    }
}

fn write_file_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("gmtmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

impl Cluster {
    /// Builds the cluster process, recovering any jobs recorded in the
    /// control directory.
    pub fn new(
        cfg: ClusterConfig,
        clock: Arc<dyn Clock>,
        client: Client,
    ) -> Result<Arc<Self>, super::GmError> {
        fs::create_dir_all(&cfg.sessions_dir)?;
        fs::create_dir_all(&cfg.control_dir)?;
        let status = StatusDir::open(&cfg.control_dir)?;
        let records = status.load_all()?;
        let counter = records
            .keys()
            .filter_map(|g| JobRecord::counter(g))
            .max()
            .unwrap_or(0)
            + 1;
        let lrms = Arc::new(Lrms::new(cfg.queues.clone()));
        Ok(Arc::new(Cluster {
            cfg: Arc::new(cfg),
            clock,
            lrms,
            client,
            status,
            state: Mutex::new(GmInner {
                records,
                counter,
                events: Vec::new(),
            }),
            mds_queries: AtomicU64::new(0),
            last_attach_ms: AtomicU64::new(0),
        }))
    }

    pub fn events(&self) -> Vec<GmEvent> {
        self.state.lock().unwrap().events.clone()
    }

    pub fn mds_query_count(&self) -> u64 {
        self.mds_queries.load(Ordering::SeqCst)
    }

    pub fn job_state(&self, gridid: &str) -> Option<JobState> {
        self.state
            .lock()
            .unwrap()
            .records
            .get(gridid)
            .map(|r| r.state)
    }

    pub fn job_record(&self, gridid: &str) -> Option<JobRecord> {
        self.state.lock().unwrap().records.get(gridid).cloned()
    }

    pub fn gridids(&self) -> Vec<String> {
        self.state.lock().unwrap().records.keys().cloned().collect()
    }

    /// Drops all in-memory job state, as a kill -9 would. The local
    /// scheduler and its processes survive, as a separate batch system
    /// would; [`Cluster::recover`] rebuilds the records from disk.
    pub fn simulate_crash(&self) {
        self.state.lock().unwrap().records.clear();
    }

    pub fn recover(&self) -> Result<(), super::GmError> {
        let records = self.status.load_all()?;
        let mut st = self.state.lock().unwrap();
        let max_counter = records
            .keys()
            .filter_map(|g| JobRecord::counter(g))
            .max()
            .unwrap_or(0);
        st.counter = st.counter.max(max_counter + 1);
        st.records = records;
        Ok(())
    }

    /// Registers with the parent registry when the registration period
    /// has elapsed.
    pub fn maybe_attach_parent(&self) {
        let Some(parent) = self.cfg.parent_giis.as_deref() else {
            return;
        };
        let now = self.clock.now_ms();
        let last = self.last_attach_ms.load(Ordering::SeqCst);
        if last != 0 && now.saturating_sub(last) < self.cfg.registration_ttl_s * 1_000 {
            return;
        }
        let result = crate::infomodel::attach_to_parent(
            &self.client,
            parent,
            &self.cfg.contact,
            crate::infomodel::ChildKind::Gris,
            Some(self.cfg.registration_ttl_s),
        );
        if result.is_ok() {
            self.last_attach_ms.store(now.max(1), Ordering::SeqCst);
        }
    }

    /// One executor pass: scheduler tick, then one step per job.
    pub fn pump_once(&self) {
        self.maybe_attach_parent();
        let now = self.clock.now_ms();
        self.lrms.tick(now);
        for gridid in self.gridids() {
            self.step_job(&gridid);
        }
        // Scheduler slots of long-gone jobs are housekeeping; an hour of
        // slack keeps them visible for any post-mortem.
        self.lrms.reap_ended(now.saturating_sub(3_600_000));
    }

    // ------------------------------------------------------------------
    // State machine executor
    // ------------------------------------------------------------------

    fn apply_locked(
        &self,
        st: &mut GmInner,
        gridid: &str,
        event: JobEvent,
        reason: Option<&str>,
    ) -> bool {
        let Some(rec) = st.records.get_mut(gridid) else {
            return false;
        };
        let Some(next) = next_state(rec.state, event) else {
            return false;
        };
        let old = rec.state;
        rec.state = next;
        rec.modified_ms = self.clock.now_ms();
        if let Some(r) = reason {
            rec.failure_reason = r.to_string();
        }
        if let Err(e) = self.status.save_transition(rec) {
            eprintln!("gm: cannot persist {gridid}: {e}");
        }
        if !rec.job.notify.is_empty() {
            let line = format!(
                "{} {} {}->{} notify:{}\n",
                rfc3339(rec.modified_ms),
                gridid,
                old.as_str(),
                next.as_str(),
                rec.job.notify
            );
            let log = self.cfg.control_dir.join("notifications.log");
            let _ = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(log)
                .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()));
        }
        st.events.push(GmEvent::Transition {
            gridid: gridid.to_string(),
            from: old,
            to: next,
        });
        true
    }

    fn apply(&self, gridid: &str, event: JobEvent, reason: Option<&str>) -> bool {
        let mut st = self.state.lock().unwrap();
        self.apply_locked(&mut st, gridid, event, reason)
    }

    fn push_event(&self, event: GmEvent) {
        self.state.lock().unwrap().events.push(event);
    }

    fn step_job(&self, gridid: &str) {
        let rec = match self.state.lock().unwrap().records.get(gridid) {
            Some(r) => r.clone(),
            None => return,
        };
        match rec.state {
            JobState::Accepted => {
                self.apply(gridid, JobEvent::Advance, None);
            }
            JobState::Preparing => self.step_preparing(&rec),
            JobState::InlrmsQ | JobState::InlrmsR => self.step_inlrms(&rec),
            JobState::Finishing => self.step_finishing(&rec),
            JobState::Canceling => {
                if let Some(id) = rec.local_id {
                    let _ = self.lrms.qdel(id, self.clock.now_ms());
                }
                self.apply(gridid, JobEvent::Advance, Some("cancelled"));
            }
            JobState::Finished | JobState::Failed => self.step_terminal(&rec),
            JobState::Deleted => {}
        }
    }

    /// Stage-in: idempotent per step — anything already in the session
    /// directory is done, remote sources are fetched, empty sources wait
    /// for the user's upload until the timeout.
    fn step_preparing(&self, rec: &JobRecord) {
        let gridid = &rec.gridid;
        if rec.local_id.is_some() {
            // Recovered from a crash after qsub: adopt the submission.
            self.apply(gridid, JobEvent::StagingDone, None);
            return;
        }
        if rec.job.disk_mb > 0 && free_bytes(&rec.session_dir) < rec.job.disk_mb.saturating_mul(MB)
        {
            self.apply(
                gridid,
                JobEvent::Failure,
                Some("stage-in failed: insufficient disk"),
            );
            return;
        }

        let mut remote: Vec<(String, String)> = Vec::new();
        let mut waiting: Vec<String> = Vec::new();
        for f in &rec.job.inputfiles {
            let dest = rec.session_dir.join(&f.name);
            if dest.is_file() {
                continue;
            }
            if f.url.is_empty() {
                waiting.push(f.name.clone());
            } else if let Some(path) = f.url.strip_prefix("file:") {
                if let Err(reason) = self.copy_local(path, &dest) {
                    self.apply(
                        gridid,
                        JobEvent::Failure,
                        Some(&format!("stage-in failed: {} ({reason})", f.name)),
                    );
                    return;
                }
                self.push_event(GmEvent::StageInFile {
                    gridid: gridid.clone(),
                    name: f.name.clone(),
                });
            } else if f.url.starts_with("ngse://") {
                remote.push((f.name.clone(), f.url.clone()));
            } else {
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!("stage-in failed: {} (unsupported source)", f.name)),
                );
                return;
            }
        }

        // Network transfers happen without the state lock.
        for (name, url) in remote {
            match self.fetch_remote(&url, &rec.session_dir.join(&name)) {
                Ok(()) => self.push_event(GmEvent::StageInFile {
                    gridid: gridid.clone(),
                    name,
                }),
                Err(_) => {
                    self.apply(
                        gridid,
                        JobEvent::Failure,
                        Some(&format!("stage-in failed: {name}")),
                    );
                    return;
                }
            }
        }

        if !waiting.is_empty() {
            let waited = self.clock.now_ms().saturating_sub(rec.modified_ms);
            if waited > self.cfg.upload_timeout_s * 1_000 {
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!("input not uploaded: {}", waiting[0])),
                );
            }
            return;
        }

        // Everything staged: make the executable runnable and submit.
        if !rec.job.executable.starts_with('/') {
            let exe = rec.session_dir.join(&rec.job.executable);
            if !exe.is_file() {
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!(
                        "stage-in failed: executable {} not staged",
                        rec.job.executable
                    )),
                );
                return;
            }
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                let _ = fs::set_permissions(&exe, fs::Permissions::from_mode(0o755));
            }
        }
        let wrapper = rec.session_dir.join(".gm.job.sh");
        if let Err(e) = fs::write(&wrapper, self.wrapper_script(&rec.job)) {
            self.apply(
                gridid,
                JobEvent::Failure,
                Some(&format!("stage-in failed: cannot write job script ({e})")),
            );
            return;
        }
        let queue = self
            .lrms
            .queue(&rec.queue)
            .expect("queue validated at submit");
        let cputime = if rec.job.cputime_s > 0 {
            rec.job.cputime_s
        } else {
            queue.max_cputime_s
        };
        let memory = if rec.job.memory_mb > 0 {
            rec.job.memory_mb
        } else {
            queue.max_memory_mb
        };
        match self.lrms.qsub(
            wrapper,
            rec.session_dir.clone(),
            &rec.queue,
            cputime,
            memory,
            self.clock.now_ms(),
        ) {
            Ok(local_id) => {
                // The local id is on disk before the INLRMS:Q status
                // commit, so a restart never submits twice.
                if let Err(e) = self.status.save_local_id(gridid, local_id) {
                    eprintln!("gm: cannot persist local id for {gridid}: {e}");
                }
                let mut st = self.state.lock().unwrap();
                if let Some(r) = st.records.get_mut(gridid) {
                    r.local_id = Some(local_id);
                }
                st.events.push(GmEvent::Qsub {
                    gridid: gridid.clone(),
                    local_id,
                });
                self.apply_locked(&mut st, gridid, JobEvent::StagingDone, None);
            }
            Err(e) => {
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!("qsub rejected: {e}")),
                );
            }
        }
    }

    fn wrapper_script(&self, job: &JobDescription) -> String {
        let stdout = if job.stdout.is_empty() {
            ".gm.out"
        } else {
            &job.stdout
        };
        let stderr = if job.stderr.is_empty() {
            ".gm.err"
        } else {
            &job.stderr
        };
        let exe = if job.executable.starts_with('/') {
            job.executable.clone()
        } else {
            format!("./{}", job.executable)
        };
        let mut cmd = shell_quote(&exe);
        for arg in &job.arguments {
            cmd.push(' ');
            cmd.push_str(&shell_quote(arg));
        }
        let redirect = if stderr == stdout {
            format!("exec >{} 2>&1", shell_quote(stdout))
        } else {
            format!("exec >{} 2>{}", shell_quote(stdout), shell_quote(stderr))
        };
        format!("#!/bin/sh\n{redirect}\nexec {cmd}\n")
    }

    fn copy_local(&self, src: &str, dest: &Path) -> Result<(), String> {
        let src = src.strip_prefix("//").unwrap_or(src);
        let src_path = Path::new(src);
        if !src_path.is_absolute() {
            return Err("file: source must be absolute".into());
        }
        let allowed = self
            .cfg
            .local_se_paths
            .iter()
            .any(|prefix| src_path == prefix || src_path.starts_with(prefix));
        if !allowed {
            return Err("source is not under a mounted storage path".into());
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        let tmp = dest.with_extension("gmtmp");
        fs::copy(src_path, &tmp).map_err(|e| e.to_string())?;
        fs::rename(&tmp, dest).map_err(|e| e.to_string())
    }

    fn fetch_remote(&self, url: &str, dest: &Path) -> Result<(), String> {
        let (_, path) = split_endpoint(url);
        if path.is_empty() {
            return Err("source url has no path".into());
        }
        let attempts = self.cfg.stage_retries.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(self.cfg.retry_backoff_ms));
            }
            let req = self.client.request(Verb::Get, &path);
            match self.client.call(url, req) {
                Ok(resp) if resp.is_ok() => {
                    return write_file_atomic(dest, &resp.body).map_err(|e| e.to_string());
                }
                Ok(resp) => last = format!("{} {}", resp.code, resp.reason),
                Err(e) => last = e.to_string(),
            }
        }
        Err(last)
    }

    fn step_inlrms(&self, rec: &JobRecord) {
        let gridid = &rec.gridid;
        let Some(local) = rec.local_id.and_then(|id| self.lrms.qstat_one(id)) else {
            self.apply(gridid, JobEvent::Failure, Some("lrms job lost"));
            return;
        };
        match local.state {
            LocalState::Queued => {}
            LocalState::Running => {
                self.apply(gridid, JobEvent::LrmsRunning, None);
            }
            LocalState::Ended => {
                // A fast job can end while still seen as queued: record
                // the run before the exit.
                self.apply(gridid, JobEvent::LrmsRunning, None);
                let mut st = self.state.lock().unwrap();
                if let Some(r) = st.records.get_mut(gridid) {
                    if r.state == JobState::InlrmsR {
                        r.exit_code = Some(local.exit_code.unwrap_or(1));
                    }
                }
                self.apply_locked(&mut st, gridid, JobEvent::LrmsExited, None);
            }
        }
    }

    /// Stage-out: every declared output must exist; destinations are
    /// uploaded (and registered when the destination names an lfn) and
    /// the session directory is pruned down to the retained outputs.
    fn step_finishing(&self, rec: &JobRecord) {
        let gridid = &rec.gridid;
        for f in &rec.job.outputfiles {
            if !rec.session_dir.join(&f.name).is_file() {
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!("stage-out failed: {} (missing)", f.name)),
                );
                return;
            }
        }
        for f in rec.job.outputfiles.iter().filter(|f| !f.url.is_empty()) {
            let (put_url, lfn) = match f.url.split_once("?lfn=") {
                Some((u, l)) => (u.to_string(), Some(l.to_string())),
                None => (f.url.clone(), None),
            };
            let bytes = match fs::read(rec.session_dir.join(&f.name)) {
                Ok(b) => b,
                Err(e) => {
                    self.apply(
                        gridid,
                        JobEvent::Failure,
                        Some(&format!("stage-out failed: {} ({e})", f.name)),
                    );
                    return;
                }
            };
            if let Err(reason) = self.upload_remote(&put_url, bytes) {
                let _ = reason;
                self.apply(
                    gridid,
                    JobEvent::Failure,
                    Some(&format!("stage-out failed: {}", f.name)),
                );
                return;
            }
            self.push_event(GmEvent::StageOutFile {
                gridid: gridid.clone(),
                name: f.name.clone(),
            });
            if let Some(lfn) = lfn {
                match self.register_replica(&lfn, &put_url) {
                    Ok(()) => self.push_event(GmEvent::RcRegistered {
                        gridid: gridid.clone(),
                        lfn,
                        pfn: put_url.clone(),
                    }),
                    Err(_) => {
                        self.apply(
                            gridid,
                            JobEvent::Failure,
                            Some(&format!("stage-out failed: {}", f.name)),
                        );
                        return;
                    }
                }
            }
        }
        let retained: BTreeSet<&str> = rec
            .job
            .outputfiles
            .iter()
            .filter(|f| f.url.is_empty())
            .map(|f| f.name.as_str())
            .collect();
        prune_session(&rec.session_dir, &retained);
        self.apply(gridid, JobEvent::StageOutDone, None);
    }

    fn upload_remote(&self, url: &str, bytes: Vec<u8>) -> Result<(), String> {
        let (_, path) = split_endpoint(url);
        if path.is_empty() {
            return Err("destination url has no path".into());
        }
        let attempts = self.cfg.stage_retries.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(self.cfg.retry_backoff_ms));
            }
            let req = self
                .client
                .request(Verb::Put, &path)
                .with_header("Overwrite", "true")
                .with_body(bytes.clone());
            match self.client.call(url, req) {
                Ok(resp) if resp.is_ok() => return Ok(()),
                Ok(resp) => last = format!("{} {}", resp.code, resp.reason),
                Err(e) => last = e.to_string(),
            }
        }
        Err(last)
    }

    fn register_replica(&self, lfn: &str, pfn: &str) -> Result<(), String> {
        let Some(rc) = self.cfg.rc_endpoint.as_deref() else {
            return Err("no replica catalog configured".into());
        };
        let req = self
            .client
            .request(Verb::Reg, format!("/rc/{lfn}"))
            .with_header("Pfn", pfn);
        match self.client.call(rc, req) {
            Ok(resp) if resp.is_ok() => Ok(()),
            Ok(resp) => Err(format!("{} {}", resp.code, resp.reason)),
            Err(e) => Err(e.to_string()),
        }
    }

    fn step_terminal(&self, rec: &JobRecord) {
        let now = self.clock.now_ms();
        let expired = now.saturating_sub(rec.modified_ms) >= rec.lifetime_s * 1_000;
        if !(rec.clean_requested || expired) {
            return;
        }
        let mut st = self.state.lock().unwrap();
        if self.apply_locked(&mut st, &rec.gridid, JobEvent::LifetimeExpired, None) {
            st.records.remove(&rec.gridid);
            drop(st);
            let _ = fs::remove_dir_all(&rec.session_dir);
            let _ = self.status.remove(&rec.gridid);
        }
    }

    // ------------------------------------------------------------------
    // Gatekeeper
    // ------------------------------------------------------------------

    fn handle_submit(&self, req: &Request, subject: &Subject) -> Response {
        if !authorize(subject, &self.cfg.gridmap) {
            return Response::error(403, "subject not in grid-map");
        }
        let body = match std::str::from_utf8(&req.body) {
            Ok(s) => s,
            Err(_) => return Response::error(400, "request body is not UTF-8"),
        };
        let job = match xrsl::parse_job(body) {
            Ok(j) => j,
            Err(e) => return Response::error(400, format!("bad xrsl: {e}")),
        };
        if job.action != Action::Submit {
            return Response::error(400, "control requests use the CANCEL/CLEAN verbs");
        }
        for f in job.inputfiles.iter().chain(job.outputfiles.iter()) {
            if !safe_relpath(&f.name) {
                return Response::error(400, format!("bad xrsl: unsafe file name {:?}", f.name));
            }
        }
        let queue = if job.queue.is_empty() {
            match self.cfg.queues.first() {
                Some(q) => q.name.clone(),
                None => return Response::error(500, "cluster has no queues"),
            }
        } else if self.lrms.queue(&job.queue).is_some() {
            job.queue.clone()
        } else {
            return Response::error(400, format!("unknown queue {:?}", job.queue));
        };

        let now = self.clock.now_ms();
        let mut st = self.state.lock().unwrap();
        let counter = st.counter;
        st.counter += 1;
        let suffix: String = {
            use rand::Rng;
            let mut rng = rand::rng();
            (0..6)
                .map(|_| char::from_digit(rng.random_range(0..16), 16).unwrap())
                .collect()
        };
        let gridid = format!("{}:{}-{}", self.cfg.name, counter, suffix);
        let session_dir = self.cfg.sessions_dir.join(&gridid);
        if let Err(e) = fs::create_dir_all(&session_dir) {
            return Response::error(500, format!("cannot create session directory: {e}"));
        }
        let lifetime_s = if job.lifetime_s > 0 {
            job.lifetime_s
        } else {
            self.cfg.default_lifetime_s
        };
        let rec = JobRecord {
            gridid: gridid.clone(),
            owner: subject.clone(),
            job,
            state: JobState::Accepted,
            session_dir,
            queue,
            local_id: None,
            exit_code: None,
            failure_reason: String::new(),
            created_ms: now,
            modified_ms: now,
            lifetime_s,
            clean_requested: false,
        };
        if let Err(e) = self.status.save_new(&rec) {
            return Response::error(500, format!("cannot record job: {e}"));
        }
        st.records.insert(gridid.clone(), rec);
        Response::ok().with_header("GridId", gridid)
    }

    fn handle_control(&self, req: &Request, subject: &Subject) -> Response {
        if !authorize(subject, &self.cfg.gridmap) {
            return Response::error(403, "subject not in grid-map");
        }
        let Some(gridid) = req.headers.get("GridId").map(str::to_string) else {
            return Response::error(400, "missing GridId header");
        };
        let want = if req.verb == Verb::Cancel {
            Action::Cancel
        } else {
            Action::Clean
        };
        if !req.body.is_empty() {
            let body = match std::str::from_utf8(&req.body) {
                Ok(s) => s,
                Err(_) => return Response::error(400, "request body is not UTF-8"),
            };
            match xrsl::parse_job(body) {
                Ok(job) if job.action == want => {}
                Ok(_) => return Response::error(400, "body action does not match verb"),
                Err(e) => return Response::error(400, format!("bad xrsl: {e}")),
            }
        }

        let mut st = self.state.lock().unwrap();
        let Some(rec) = st.records.get_mut(&gridid) else {
            return Response::error(404, "unknown job");
        };
        if &rec.owner != subject {
            return Response::error(403, "only the owner may control a job");
        }
        let state = rec.state;
        match want {
            Action::Cancel => {
                if next_state(state, JobEvent::Cancel).is_some() {
                    self.apply_locked(&mut st, &gridid, JobEvent::Cancel, None);
                    Response::ok()
                } else if state == JobState::Canceling {
                    Response::ok()
                } else {
                    Response::error(409, format!("job is already {state}"))
                }
            }
            Action::Clean => {
                if state.is_terminal() {
                    let session = rec.session_dir.clone();
                    self.apply_locked(&mut st, &gridid, JobEvent::LifetimeExpired, None);
                    st.records.remove(&gridid);
                    drop(st);
                    let _ = fs::remove_dir_all(session);
                    let _ = self.status.remove(&gridid);
                    Response::ok()
                } else {
                    rec.clean_requested = true;
                    let rec_snapshot = rec.clone();
                    let _ = self.status.save_transition(&rec_snapshot);
                    self.apply_locked(&mut st, &gridid, JobEvent::Cancel, None);
                    Response::ok()
                }
            }
            Action::Submit => unreachable!("want is cancel or clean"),
        }
    }

    // ------------------------------------------------------------------
    // Session directory access (upload before run, download after)
    // ------------------------------------------------------------------

    fn handle_session(&self, req: &Request, subject: &Subject) -> Response {
        let Some(rest) = req.target.strip_prefix("/sessions/") else {
            return Response::error(404, "no such target");
        };
        let (gridid, rel) = match rest.split_once('/') {
            Some((g, r)) => (g.to_string(), r.trim_end_matches('/').to_string()),
            None => (rest.trim_end_matches('/').to_string(), String::new()),
        };
        let (session_dir, state) = {
            let st = self.state.lock().unwrap();
            let Some(rec) = st.records.get(&gridid) else {
                return Response::error(404, "unknown job");
            };
            if &rec.owner != subject {
                return Response::error(403, "only the owner may access the session");
            }
            (rec.session_dir.clone(), rec.state)
        };
        match req.verb {
            Verb::Put => {
                if !matches!(state, JobState::Accepted | JobState::Preparing) {
                    return Response::error(409, format!("job is already {state}"));
                }
                if !safe_relpath(&rel) {
                    return Response::error(400, "bad session path");
                }
                match write_file_atomic(&session_dir.join(&rel), &req.body) {
                    Ok(()) => Response::ok(),
                    Err(e) => Response::error(500, e.to_string()),
                }
            }
            Verb::Get => {
                if !safe_relpath(&rel) {
                    return Response::error(400, "bad session path");
                }
                match fs::read(session_dir.join(&rel)) {
                    Ok(bytes) => Response::ok().with_body(bytes),
                    Err(_) => Response::error(404, "no such file"),
                }
            }
            Verb::List => {
                let mut files = Vec::new();
                if walk_session(&session_dir, &session_dir, &mut files).is_err() {
                    return Response::error(404, "session directory gone");
                }
                files.sort();
                let mut body = String::new();
                for (name, size) in files {
                    body.push_str(&format!("{name} {size}\n"));
                }
                Response::ok().with_body(body)
            }
            other => Response::error(400, format!("verb {other} not served on sessions")),
        }
    }

    // ------------------------------------------------------------------
    // Information provider
    // ------------------------------------------------------------------

    fn cluster_state(&self) -> ClusterState {
        let queues: Vec<QueueState> = self
            .cfg
            .queues
            .iter()
            .map(|qc| QueueState {
                name: qc.name.clone(),
                max_cputime_s: qc.max_cputime_s,
                max_memory_mb: qc.max_memory_mb,
                max_disk_mb: qc.max_disk_mb,
                cpus: qc.cpus,
                running: self.lrms.running_in_queue(&qc.name),
                queued: self.lrms.queued_in_queue(&qc.name),
            })
            .collect();
        let total = self.lrms.total_cpus();
        ClusterState {
            name: self.cfg.name.clone(),
            country: self.cfg.country.clone(),
            aliases: self.cfg.aliases.clone(),
            total_cpus: total,
            free_cpus: total.saturating_sub(self.lrms.total_running()),
            runtime_environments: self.cfg.runtime_environments.clone(),
            local_se_paths: self
                .cfg
                .local_se_paths
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            queues,
            authorized: self.cfg.gridmap.clone(),
            contact: self.cfg.contact.clone(),
        }
    }

    /// The full information subtree for this cluster.
    pub fn gris_entries(&self) -> Vec<Entry> {
        let st = self.state.lock().unwrap();
        self.snapshot_locked(&st)
    }

    fn snapshot_locked(&self, st: &GmInner) -> Vec<Entry> {
        let jobs: Vec<JobInfo> = st
            .records
            .values()
            .map(|r| JobInfo {
                gridid: r.gridid.clone(),
                owner_dn: r.owner.dn().to_string(),
                status: r.state.as_str().to_string(),
                queue: r.queue.clone(),
                submitted_ms: r.created_ms,
                exit_code: r.exit_code,
            })
            .collect();
        gris_snapshot(&self.cluster_state(), &jobs, &self.cfg.gridmap)
    }

    /// Job entries visible through the provider vs. job records held by
    /// the manager, counted under one lock.
    pub fn consistency_sample(&self) -> (usize, usize) {
        let st = self.state.lock().unwrap();
        let visible = self
            .snapshot_locked(&st)
            .iter()
            .filter(|e| e.objectclass() == Some(OC_JOB))
            .count();
        (visible, st.records.len())
    }

    fn handle_query(&self, req: &Request) -> Response {
        self.mds_queries.fetch_add(1, Ordering::SeqCst);
        let filter = match req.headers.get("Filter").map(parse_filter) {
            Some(Ok(f)) => f,
            Some(Err(e)) => return Response::error(400, format!("bad filter: {e}")),
            None => Filter::all(),
        };
        let entries: Vec<Entry> = self
            .gris_entries()
            .into_iter()
            .filter(|e| filter.eval(e))
            .collect();
        Response::ok().with_body(render_entries(&entries))
    }
}

fn walk_session(base: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk_session(base, &path, out)?;
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

fn prune_session(session: &Path, retained: &BTreeSet<&str>) {
    let mut files = Vec::new();
    if walk_session(session, session, &mut files).is_err() {
        return;
    }
    for (rel, _) in files {
        if !retained.contains(rel.as_str()) {
            let _ = fs::remove_file(session.join(&rel));
        }
    }
    // Sweep now-empty subdirectories.
    fn sweep(dir: &Path, root: bool) {
        if let Ok(entries) = fs::read_dir(dir) {
            for entry in entries.flatten() {
                if entry.path().is_dir() {
                    sweep(&entry.path(), false);
                }
            }
        }
        if !root
            && fs::read_dir(dir)
                .map(|mut d| d.next().is_none())
                .unwrap_or(false)
        {
            let _ = fs::remove_dir(dir);
        }
    }
    sweep(session, true);
}

impl Service for Cluster {
    fn role(&self) -> ServiceRole {
        ServiceRole::Cluster
    }

    fn handle(&self, req: Request) -> Response {
        let subject = match req.subject() {
            Ok(s) => s,
            Err(e) => return Response::error(400, e.to_string()),
        };
        match (req.verb, req.target.as_str()) {
            (Verb::Query, "/mds") => self.handle_query(&req),
            (Verb::Submit, "/jobs") => self.handle_submit(&req, &subject),
            (Verb::Cancel | Verb::Clean, "/jobs") => self.handle_control(&req, &subject),
            (Verb::Put | Verb::Get | Verb::List, t) if t.starts_with("/sessions/") => {
                self.handle_session(&req, &subject)
            }
            (verb, target) => Response::error(400, format!("no handler for {verb} {target}")),
        }
    }
}

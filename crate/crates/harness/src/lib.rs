//! Test and demo orchestration: boots whole fleets in one process over
//! the in-process transport, drives them on a logical clock, injects
//! faults (dead storage, dead registry children, manager crashes) and
//! runs the complete job task flow while keeping a transcript and a
//! transfer ledger.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};

use ngrid::broker::{feasible, match_candidates, ResourceCandidate, Ui};
use ngrid::clock::{Clock, LogicalClock};
use ngrid::config::{parse_fleet, FleetConfig};
use ngrid::gm::{Cluster, ClusterConfig, GmEvent, JobState};
use ngrid::infomodel::{attach_to_parent, ChildKind, Giis, GiisConfig};
use ngrid::rc::{RcConfig, ReplicaCatalog};
use ngrid::se::{SeConfig, StorageElement};
use ngrid::wire::{Client, LocalNet, ServiceRole, Subject, TransferLedger, Transport, Verb};
use ngrid::xrsl::JobDescription;

/// A parent registration the fleet refreshes on behalf of a service.
struct Registration {
    parent: String,
    endpoint: String,
    kind: ChildKind,
    ttl_s: u64,
    client: Client,
    last_ms: std::sync::atomic::AtomicU64,
}

pub struct Fleet {
    pub cfg: FleetConfig,
    pub net: Arc<LocalNet>,
    pub clock: Arc<LogicalClock>,
    pub ledger: Arc<TransferLedger>,
    pub clusters: Vec<Arc<Cluster>>,
    pub ses: Vec<Arc<StorageElement>>,
    pub rcs: Vec<Arc<ReplicaCatalog>>,
    pub giises: Vec<Arc<Giis>>,
    registrations: Vec<Registration>,
    pub root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

fn service_subject(name: &str) -> Subject {
    Subject::new(format!("/O=Grid/CN=service-{name}")).expect("service subject is well-formed")
}

impl Fleet {
    /// Boots every service of `cfg` in-process, rooted at `root`.
    pub fn boot(cfg: FleetConfig, root: &Path) -> Result<Fleet> {
        let net = LocalNet::new();
        let clock = Arc::new(LogicalClock::new(0));
        let ledger = Arc::new(TransferLedger::new());
        let mut fleet = Fleet {
            cfg,
            net,
            clock,
            ledger,
            clusters: Vec::new(),
            ses: Vec::new(),
            rcs: Vec::new(),
            giises: Vec::new(),
            registrations: Vec::new(),
            root: root.to_path_buf(),
            _tmp: None,
        };
        fleet.boot_services()?;
        fleet.pump();
        Ok(fleet)
    }

    /// Boots the standard demo fleet (3 clusters, 2 storage elements,
    /// 1 replica catalog, a two-level registry) in a temp directory.
    pub fn boot_demo() -> Result<Fleet> {
        let tmp = tempfile::tempdir().context("demo work directory")?;
        let cfg = demo_fleet(tmp.path())?;
        let mut fleet = Fleet::boot(cfg, tmp.path())?;
        fleet._tmp = Some(tmp);
        Ok(fleet)
    }

    fn client_for(&self, name: &str, role: ServiceRole) -> Client {
        Client::new(
            service_subject(name),
            role,
            Transport::Local(self.net.clone()),
        )
        .with_ledger(self.ledger.clone())
    }

    fn boot_services(&mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        for g in &cfg.giises {
            let giis = Arc::new(Giis::new(
                GiisConfig {
                    name: g.name.clone(),
                    country: g.country.clone(),
                    default_ttl_ms: g.ttl_s * 1_000,
                    allow: g.allow.clone(),
                    subject: service_subject(&g.name),
                },
                self.clock.clone(),
                self.client_for(&g.name, ServiceRole::Giis),
            ));
            self.net
                .register(&format!("{}:{}", g.host, g.port), giis.clone());
            if let Some(parent) = &g.parent_giis {
                self.register_child(
                    &g.name,
                    parent,
                    &format!("ng://{}:{}", g.host, g.port),
                    ChildKind::Giis,
                    g.ttl_s,
                )?;
            }
            self.giises.push(giis);
        }
        for s in &cfg.ses {
            let root = s.root.clone().unwrap_or_else(|| self.root.join(&s.name));
            let se = Arc::new(StorageElement::new(SeConfig {
                name: s.name.clone(),
                country: s.country.clone(),
                root,
                acl: s.acl.clone(),
                capacity_mb: s.capacity_mb,
                base_url: format!("ngse://{}:{}", s.host, s.port),
            })?);
            self.net
                .register(&format!("{}:{}", s.host, s.port), se.clone());
            if let Some(parent) = &s.parent_giis {
                self.register_child(
                    &s.name,
                    parent,
                    &format!("ngse://{}:{}", s.host, s.port),
                    ChildKind::Gris,
                    s.ttl_s,
                )?;
            }
            self.ses.push(se);
        }
        for r in &cfg.rcs {
            let log = r
                .log
                .clone()
                .unwrap_or_else(|| self.root.join(&r.name).join("rc.log"));
            let rc = Arc::new(ReplicaCatalog::open(RcConfig {
                name: r.name.clone(),
                country: r.country.clone(),
                log_path: log,
                writers: r.writers.clone(),
                base_url: format!("ng://{}:{}", r.host, r.port),
            })?);
            self.net
                .register(&format!("{}:{}", r.host, r.port), rc.clone());
            if let Some(parent) = &r.parent_giis {
                self.register_child(
                    &r.name,
                    parent,
                    &format!("ng://{}:{}", r.host, r.port),
                    ChildKind::Gris,
                    r.ttl_s,
                )?;
            }
            self.rcs.push(rc);
        }
        for c in &cfg.clusters {
            let base = c.workdir.clone().unwrap_or_else(|| self.root.join(&c.name));
            let mut cluster_cfg = ClusterConfig::new(&c.name, &c.country, &base);
            cluster_cfg.contact = format!("ng://{}:{}", c.host, c.port);
            cluster_cfg.queues = c.queues.clone();
            cluster_cfg.gridmap = c.gridmap.clone();
            cluster_cfg.runtime_environments = c.runtime_environments.clone();
            cluster_cfg.local_se_paths = c.local_se.clone();
            cluster_cfg.rc_endpoint = c.rc.as_deref().and_then(|r| self.cfg.rc_endpoint(r));
            cluster_cfg.parent_giis = c
                .parent_giis
                .as_deref()
                .and_then(|p| self.cfg.giis_endpoint(p));
            cluster_cfg.registration_ttl_s = c.ttl_s;
            cluster_cfg.default_lifetime_s = c.lifetime_s;
            cluster_cfg.upload_timeout_s = c.upload_timeout_s;
            cluster_cfg.stage_retries = c.retries;
            cluster_cfg.retry_backoff_ms = c.retry_backoff_ms;
            let client = Client::new(
                cluster_cfg.subject.clone(),
                ServiceRole::Cluster,
                Transport::Local(self.net.clone()),
            )
            .with_ledger(self.ledger.clone());
            let cluster = Cluster::new(cluster_cfg, self.clock.clone(), client)
                .map_err(|e| anyhow!("cluster {}: {e}", c.name))?;
            self.net
                .register(&format!("{}:{}", c.host, c.port), cluster.clone());
            self.clusters.push(cluster);
        }
        Ok(())
    }

    fn register_child(
        &mut self,
        name: &str,
        parent: &str,
        endpoint: &str,
        kind: ChildKind,
        ttl_s: u64,
    ) -> Result<()> {
        let parent = self
            .cfg
            .giis_endpoint(parent)
            .ok_or_else(|| anyhow!("{name}: unknown parent registry {parent:?}"))?;
        self.registrations.push(Registration {
            parent,
            endpoint: endpoint.to_string(),
            kind,
            ttl_s,
            client: self.client_for(name, ServiceRole::Cluster),
            last_ms: std::sync::atomic::AtomicU64::new(u64::MAX),
        });
        Ok(())
    }

    pub fn cluster(&self, name: &str) -> &Arc<Cluster> {
        self.clusters
            .iter()
            .find(|c| c.cfg.name == name)
            .unwrap_or_else(|| panic!("no cluster {name}"))
    }

    pub fn se(&self, name: &str) -> &Arc<StorageElement> {
        self.ses
            .iter()
            .find(|s| s.cfg.name == name)
            .unwrap_or_else(|| panic!("no se {name}"))
    }

    pub fn giis(&self, name: &str) -> &Arc<Giis> {
        self.giises
            .iter()
            .find(|g| g.cfg.name == name)
            .unwrap_or_else(|| panic!("no giis {name}"))
    }

    /// The root of the registry hierarchy.
    pub fn top_giis(&self) -> String {
        self.cfg
            .giises
            .iter()
            .find(|g| g.parent_giis.is_none())
            .or_else(|| self.cfg.giises.first())
            .map(|g| format!("ng://{}:{}", g.host, g.port))
            .expect("fleet has a registry")
    }

    pub fn rc_endpoint(&self) -> Option<String> {
        self.cfg
            .rcs
            .first()
            .map(|r| format!("ng://{}:{}", r.host, r.port))
    }

    pub fn endpoint(&self, name: &str) -> String {
        let by = |host: &str, port: u16| format!("{host}:{port}");
        for c in &self.cfg.clusters {
            if c.name == name {
                return by(&c.host, c.port);
            }
        }
        for s in &self.cfg.ses {
            if s.name == name {
                return by(&s.host, s.port);
            }
        }
        for r in &self.cfg.rcs {
            if r.name == name {
                return by(&r.host, r.port);
            }
        }
        for g in &self.cfg.giises {
            if g.name == name {
                return by(&g.host, g.port);
            }
        }
        panic!("no service {name}");
    }

    /// A client session for `subject`, accounted in the fleet ledger.
    pub fn ui(&self, subject: &Subject) -> Ui {
        let client = Client::new(
            subject.clone(),
            ServiceRole::Ui,
            Transport::Local(self.net.clone()),
        )
        .with_ledger(self.ledger.clone());
        Ui::new(client, self.top_giis())
    }

    /// Marks a service dead or alive on the in-process network.
    pub fn set_down(&self, name: &str, down: bool) {
        self.net.set_down(&self.endpoint(name), down);
    }

    /// One pass over the whole fleet: refresh registrations and run every
    /// cluster's executor once.
    pub fn pump(&self) {
        let now = self.clock.now_ms();
        for reg in &self.registrations {
            let last = reg.last_ms.load(std::sync::atomic::Ordering::SeqCst);
            if last != u64::MAX && now.saturating_sub(last) < reg.ttl_s * 1_000 {
                continue;
            }
            if attach_to_parent(
                &reg.client,
                &reg.parent,
                &reg.endpoint,
                reg.kind,
                Some(reg.ttl_s),
            )
            .is_ok()
            {
                reg.last_ms.store(now, std::sync::atomic::Ordering::SeqCst);
            }
        }
        for cluster in &self.clusters {
            cluster.pump_once();
        }
    }

    /// Pumps until `pred` holds, sleeping a little real time and
    /// advancing the logical clock between passes.
    pub fn pump_until(
        &self,
        mut pred: impl FnMut() -> bool,
        max_iters: u32,
        advance_ms: u64,
    ) -> Result<()> {
        for _ in 0..max_iters {
            self.pump();
            if pred() {
                return Ok(());
            }
            std::thread::sleep(std::time::Duration::from_millis(3));
            self.clock.advance(advance_ms);
        }
        bail!("condition not reached within {max_iters} fleet pumps")
    }

    /// Finds the cluster currently holding `gridid`, if any.
    pub fn job_state(&self, gridid: &str) -> Option<(String, JobState)> {
        self.clusters
            .iter()
            .find_map(|c| c.job_state(gridid).map(|s| (c.cfg.name.clone(), s)))
    }

    /// Stores `content` on a storage element and registers it in the
    /// first replica catalog under `lfn`.
    pub fn preload_input(
        &self,
        se_name: &str,
        path: &str,
        lfn: &str,
        content: &[u8],
        subject: &Subject,
    ) -> Result<String> {
        let client = Client::new(
            subject.clone(),
            ServiceRole::Ui,
            Transport::Local(self.net.clone()),
        )
        .with_ledger(self.ledger.clone());
        let se_section = self
            .cfg
            .ses
            .iter()
            .find(|s| s.name == se_name)
            .ok_or_else(|| anyhow!("no se {se_name}"))?;
        let base = format!("ngse://{}:{}", se_section.host, se_section.port);
        let url = format!("{base}{path}");
        let put = client
            .request(Verb::Put, path)
            .with_header("Overwrite", "true")
            .with_body(content.to_vec());
        let resp = client.call(&base, put)?;
        if !resp.is_ok() {
            bail!("preload put: {} {}", resp.code, resp.reason);
        }
        let rc = self
            .rc_endpoint()
            .ok_or_else(|| anyhow!("fleet has no rc"))?;
        let reg = client
            .request(Verb::Reg, format!("/rc/{lfn}"))
            .with_header("Pfn", &url);
        let resp = client.call(&rc, reg)?;
        if !resp.is_ok() {
            bail!("preload register: {} {}", resp.code, resp.reason);
        }
        Ok(url)
    }
}

/// The standard demo fleet description.
pub fn demo_fleet_text() -> String {
    r#"# Demo fleet: two countries, three clusters, two storage elements,
# one replica catalog, a two-level registry hierarchy.

[giis "top"]
port = 39300
ttl = 2

[giis "dk"]
port = 39301
country = dk
parent_giis = top
ttl = 2

[giis "no"]
port = 39302
country = no
parent_giis = top
ttl = 2

[cluster "alpha"]
port = 39000
country = dk
parent_giis = dk
queues = short:600:512:1024:2 long:3600:1024:4096:1
runtimeenvironments = OS/LINUX-2.4 APPS/HEP-1
rc = main
ttl = 2
upload_timeout = 10
retry_backoff_ms = 20

[cluster "beta"]
port = 39001
country = dk
parent_giis = dk
queues = short:600:512:1024:1
runtimeenvironments = OS/LINUX-2.4
rc = main
ttl = 2
upload_timeout = 10
retry_backoff_ms = 20

[cluster "gamma"]
port = 39002
country = no
parent_giis = no
queues = batch:1200:1024:2048:2
runtimeenvironments = OS/LINUX-2.4 APPS/HEP-1
rc = main
ttl = 2
upload_timeout = 10
retry_backoff_ms = 20

[se "se1"]
port = 39100
country = dk
parent_giis = dk
capacity_mb = 512
ttl = 2

[se "se2"]
port = 39101
country = no
parent_giis = no
capacity_mb = 512
ttl = 2

[rc "main"]
port = 39200
country = dk
parent_giis = dk
ttl = 2
"#
    .to_string()
}

pub fn demo_fleet(base: &Path) -> Result<FleetConfig> {
    parse_fleet(&demo_fleet_text(), base).map_err(|e| anyhow!("demo fleet: {e}"))
}

// ---------------------------------------------------------------------
// Task flow
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TranscriptEvent {
    pub label: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
    pub gridid: String,
    pub final_state: String,
    pub downloaded: Vec<PathBuf>,
}

impl Transcript {
    fn push(&mut self, label: impl Into<String>, detail: impl Into<String>) {
        self.events.push(TranscriptEvent {
            label: label.into(),
            detail: detail.into(),
        });
    }

    /// Event labels only — the timing-independent shape of the run.
    pub fn labels(&self) -> Vec<String> {
        self.events.iter().map(|e| e.label.clone()).collect()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.events {
            if e.detail.is_empty() {
                writeln!(f, "{}", e.label)?;
            } else {
                writeln!(f, "{} {}", e.label, e.detail)?;
            }
        }
        Ok(())
    }
}

pub struct TaskflowSpec {
    pub subject: Subject,
    pub job: JobDescription,
    /// Content for inputs with an empty source, uploaded after submit.
    pub uploads: BTreeMap<String, Vec<u8>>,
    /// Cancel the job once it reaches this state.
    pub cancel_at: Option<JobState>,
    pub download_dir: PathBuf,
    pub max_iters: u32,
    pub advance_ms: u64,
}

impl TaskflowSpec {
    pub fn new(subject: Subject, job: JobDescription, download_dir: PathBuf) -> Self {
        TaskflowSpec {
            subject,
            job,
            uploads: BTreeMap::new(),
            cancel_at: None,
            download_dir,
            max_iters: 3_000,
            advance_ms: 20,
        }
    }
}

/// Runs the complete task flow — discovery, replica resolution,
/// brokering, submission, upload, execution, monitoring through the
/// registry, optional cancellation, output retrieval — and returns the
/// assembled transcript.
pub fn run_taskflow(fleet: &Fleet, spec: TaskflowSpec) -> Result<Transcript> {
    let mut t = Transcript::default();
    let ui = fleet.ui(&spec.subject);

    // Make sure every service has registered and caches can fill.
    fleet.pump();

    let discovery = ui.discover().context("discovery")?;
    t.push(
        "giis-query",
        format!("clusters={}", discovery.clusters.len()),
    );

    let rc = fleet
        .rc_endpoint()
        .ok_or_else(|| anyhow!("fleet has no rc"))?;
    let (job, resolved) = ui.resolve_inputs(&spec.job, &rc).context("rc lookup")?;
    for r in &resolved {
        t.push("rc-lookup", format!("{} -> {}", r.name, r.chosen_pfn));
    }

    let candidates = match_candidates(&job, &discovery.clusters, &spec.subject);
    let ranked = feasible(&candidates);
    let target: &ResourceCandidate = ranked
        .first()
        .copied()
        .ok_or_else(|| anyhow!("broker: no feasible resource"))?;
    t.push(
        "broker-select",
        format!("{}/{}", target.cluster.name, target.queue.name),
    );

    let gridid = ui.submit(&job, target, &spec.uploads).context("submit")?;
    t.push("submit", gridid.clone());
    t.gridid = gridid.clone();
    let cluster = fleet.cluster(&target.cluster.name).clone();

    // Drive the fleet until the job settles, watching the information
    // system for externally visible status changes.
    let mut seen_status: Vec<String> = Vec::new();
    let mut cancel_pending = spec.cancel_at;
    let mut terminal: Option<JobState> = None;
    for _ in 0..spec.max_iters {
        fleet.pump();
        if let Some(state) = cluster.job_state(&gridid) {
            if let Some(at) = cancel_pending {
                if state == at {
                    ui.control(
                        &gridid,
                        &target.cluster.contact,
                        ngrid::xrsl::Action::Cancel,
                    )
                    .context("cancel")?;
                    t.push("cancel", format!("at {at}"));
                    cancel_pending = None;
                }
            }
            if matches!(state, JobState::Finished | JobState::Failed) {
                terminal = Some(state);
                break;
            }
        } else {
            bail!("job {gridid} vanished before reaching a terminal state");
        }
        let status = ui.status(&gridid).unwrap_or_else(|_| "UNKNOWN".to_string());
        if status != "UNKNOWN" && seen_status.last() != Some(&status) {
            seen_status.push(status);
        }
        std::thread::sleep(std::time::Duration::from_millis(3));
        fleet.clock.advance(spec.advance_ms);
    }
    let Some(final_state) = terminal else {
        let stuck = cluster
            .job_state(&gridid)
            .map(|s| s.to_string())
            .unwrap_or_else(|| "GONE".to_string());
        bail!("task flow timed out at step: job stuck in {stuck}");
    };

    // Assemble the cluster-side events in canonical order.
    let events = cluster.events();
    for e in &events {
        if let GmEvent::StageInFile { gridid: g, name } = e {
            if g == &gridid {
                t.push("stage-in", name.clone());
            }
        }
    }
    for name in spec.uploads.keys() {
        t.push("upload", name.clone());
    }
    for e in &events {
        if let GmEvent::Qsub {
            gridid: g,
            local_id,
        } = e
        {
            if g == &gridid {
                t.push("qsub", format!("local {local_id}"));
            }
        }
    }
    if events.iter().any(|e| {
        matches!(e, GmEvent::Transition { gridid: g, to, .. } if g == &gridid && *to == JobState::InlrmsR)
    }) {
        t.push("run", String::new());
    }
    for s in &seen_status {
        t.push("status", s.clone());
    }
    for e in &events {
        match e {
            GmEvent::StageOutFile { gridid: g, name } if g == &gridid => {
                t.push("stage-out", name.clone());
            }
            GmEvent::RcRegistered {
                gridid: g,
                lfn,
                pfn,
            } if g == &gridid => {
                t.push("rc-register", format!("{lfn} -> {pfn}"));
            }
            _ => {}
        }
    }

    if final_state == JobState::Finished {
        let fetched = ui
            .fetch_outputs(&gridid, &target.cluster.contact, &spec.download_dir)
            .context("download outputs")?;
        for name in &fetched {
            t.push("download", name.clone());
            t.downloaded.push(spec.download_dir.join(name));
        }
    }

    let refreshes: u64 = fleet
        .giises
        .iter()
        .flat_map(|g| g.fetch_counts())
        .map(|(_, n)| n)
        .sum();
    t.push("giis-refresh", format!("fetches={refreshes}"));
    t.push("final", final_state.to_string());
    t.final_state = final_state.to_string();
    Ok(t)
}

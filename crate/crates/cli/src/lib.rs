//! Command implementations behind the `ng*` binaries.
//!
//! Client commands read the caller identity from `NG_SUBJECT` and the
//! default registry from `NG_GIIS`; their output is line-oriented with
//! stable field order. Exit codes: 0 success, 1 user error, 2 remote
//! error. The command bodies work against any [`Ui`], so tests drive
//! them over the in-process transport while the binaries use TCP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ngrid::broker::{feasible, match_candidates, Ui, UiError};
use ngrid::clock::SystemClock;
use ngrid::config::{parse_fleet, FleetConfig};
use ngrid::gm::{Cluster, ClusterConfig};
use ngrid::infomodel::{attach_to_parent, render_entries, ChildKind, Giis, GiisConfig};
use ngrid::rc::{RcConfig, ReplicaCatalog};
use ngrid::se::{SeConfig, StorageElement};
use ngrid::wire::{serve_tcp, Client, ServiceRole, Subject, Transport};
use ngrid::xrsl::{self, Action};

#[derive(Debug)]
pub enum CmdError {
    /// The caller did something wrong: bad flags, bad file, bad xRSL.
    User(String),
    /// A service answered with an error or was unreachable.
    Remote(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::User(_) => 1,
            CmdError::Remote(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::User(m) | CmdError::Remote(m) => m,
        }
    }
}

impl From<UiError> for CmdError {
    fn from(e: UiError) -> Self {
        match e {
            UiError::Remote { .. } | UiError::Wire(_) => CmdError::Remote(e.to_string()),
            other => CmdError::User(other.to_string()),
        }
    }
}

pub type CmdResult = Result<String, CmdError>;

/// Builds the client context from `NG_SUBJECT` and `NG_GIIS`.
pub fn ui_from_env(giis_flag: Option<&str>) -> Result<Ui, CmdError> {
    let dn = std::env::var("NG_SUBJECT")
        .map_err(|_| CmdError::User("NG_SUBJECT is not set".to_string()))?;
    let subject = Subject::new(dn).map_err(|e| CmdError::User(format!("NG_SUBJECT: {e}")))?;
    let giis = match giis_flag {
        Some(g) => g.to_string(),
        None => std::env::var("NG_GIIS")
            .map_err(|_| CmdError::User("no registry: set NG_GIIS or pass --giis".to_string()))?,
    };
    let client = Client::new(subject, ServiceRole::Ui, Transport::Tcp);
    Ok(Ui::new(client, giis))
}

/// The first replica catalog advertised in the information system.
pub fn find_rc(ui: &Ui) -> Result<Option<String>, CmdError> {
    let req = ui
        .client
        .request(ngrid::wire::Verb::Query, "/mds")
        .with_header("Filter", "(objectclass=nordugrid-rc)")
        .with_header("Recurse", "true");
    let resp = ui.client.call(&ui.giis, req).map_err(UiError::Wire)?;
    if !resp.is_ok() {
        return Err(CmdError::Remote(format!(
            "information query: {} {}",
            resp.code, resp.reason
        )));
    }
    let text = String::from_utf8_lossy(&resp.body).into_owned();
    let entries =
        ngrid::infomodel::parse_entries(&text).map_err(|e| CmdError::Remote(e.to_string()))?;
    Ok(entries
        .first()
        .and_then(|e| e.first("nordugrid-rc-baseurl"))
        .map(str::to_string))
}

/// `ngsub`: match, optionally submit, print the grid id (or the ranked
/// candidate table under `--dryrun`).
pub fn ngsub(
    ui: &Ui,
    xrsl_text: &str,
    local_files: &BTreeMap<String, Vec<u8>>,
    dryrun: bool,
) -> CmdResult {
    let job = xrsl::parse_job(xrsl_text).map_err(|e| CmdError::User(e.to_string()))?;
    if job.action != Action::Submit {
        return Err(CmdError::User(
            "ngsub submits jobs; use ngcancel/ngclean for control requests".to_string(),
        ));
    }
    let discovery = ui.discover()?;
    let job = if job.inputfiles.iter().any(|f| f.url.starts_with("rc:")) {
        let rc = find_rc(ui)?.ok_or_else(|| {
            CmdError::User("no replica catalog in the information system".to_string())
        })?;
        ui.resolve_inputs(&job, &rc)?.0
    } else {
        job
    };
    let candidates = match_candidates(&job, &discovery.clusters, ui.subject());
    if dryrun {
        let mut out = String::new();
        if discovery.partial {
            out.push_str("WARNING partial discovery: some registry children were skipped\n");
        }
        for c in &candidates {
            if c.feasible() {
                writeln!(
                    out,
                    "CANDIDATE {} {} FEASIBLE free={} queued={}",
                    c.cluster.name,
                    c.queue.name,
                    c.cluster.free_cpus,
                    c.queue.effective_queue_length()
                )
                .unwrap();
            } else {
                writeln!(
                    out,
                    "CANDIDATE {} {} REJECTED {}",
                    c.cluster.name,
                    c.queue.name,
                    c.rejection_reasons.join(",")
                )
                .unwrap();
            }
        }
        return Ok(out);
    }
    let ranked = feasible(&candidates);
    let target = ranked
        .first()
        .ok_or_else(|| CmdError::User("no feasible resource".to_string()))?;
    let gridid = ui.submit(&job, target, local_files)?;
    Ok(format!("{gridid}\n"))
}

/// Local content for every upload-source input, read next to the caller.
pub fn collect_local_inputs(
    job_text: &str,
    base: &Path,
) -> Result<BTreeMap<String, Vec<u8>>, CmdError> {
    let job = xrsl::parse_job(job_text).map_err(|e| CmdError::User(e.to_string()))?;
    let mut out = BTreeMap::new();
    for f in job.inputfiles.iter().filter(|f| f.url.is_empty()) {
        let path = base.join(&f.name);
        let bytes = std::fs::read(&path).map_err(|e| {
            CmdError::User(format!(
                "input {}: cannot read {}: {e}",
                f.name,
                path.display()
            ))
        })?;
        out.insert(f.name.clone(), bytes);
    }
    Ok(out)
}

pub enum StatTarget<'a> {
    One(&'a str),
    All,
}

/// `ngstat`: `<gridid> <state>` lines; unknown jobs print UNKNOWN.
pub fn ngstat(ui: &Ui, target: StatTarget<'_>) -> CmdResult {
    match target {
        StatTarget::One(gridid) => {
            let state = ui.status(gridid)?;
            Ok(format!("{gridid} {state}\n"))
        }
        StatTarget::All => {
            let mut jobs = ui.my_jobs()?;
            jobs.sort();
            let mut out = String::new();
            for (gridid, state) in jobs {
                writeln!(out, "{gridid} {state}").unwrap();
            }
            Ok(out)
        }
    }
}

/// `ngget`: download the retained outputs, one `RETRIEVED` line each.
pub fn ngget(ui: &Ui, gridid: &str, dir: &Path) -> CmdResult {
    let cluster = ui.locate_job(gridid)?;
    let files = ui.fetch_outputs(gridid, &cluster, dir)?;
    let mut out = String::new();
    for name in files {
        writeln!(out, "RETRIEVED {}", dir.join(name).display()).unwrap();
    }
    Ok(out)
}

pub fn ngcancel(ui: &Ui, gridid: &str) -> CmdResult {
    ui.cancel(gridid)?;
    Ok(format!("CANCELLED {gridid}\n"))
}

pub fn ngclean(ui: &Ui, gridid: &str) -> CmdResult {
    ui.clean(gridid)?;
    Ok(format!("CLEANED {gridid}\n"))
}

/// `ngls`: entries matching the filter, in the standard block format.
pub fn ngls(ui: &Ui, filter: Option<&str>) -> CmdResult {
    let req = ui
        .client
        .request(ngrid::wire::Verb::Query, "/mds")
        .with_header("Filter", filter.unwrap_or("(objectclass=*)"))
        .with_header("Recurse", "true");
    let resp = ui.client.call(&ui.giis, req).map_err(UiError::Wire)?;
    if !resp.is_ok() {
        return Err(CmdError::Remote(format!(
            "information query: {} {}",
            resp.code, resp.reason
        )));
    }
    let text = String::from_utf8_lossy(&resp.body).into_owned();
    let entries =
        ngrid::infomodel::parse_entries(&text).map_err(|e| CmdError::Remote(e.to_string()))?;
    let mut out = render_entries(&entries);
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Service launchers
// ---------------------------------------------------------------------

pub fn load_fleet(config_path: &Path) -> Result<FleetConfig, CmdError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CmdError::User(format!("cannot read {}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    parse_fleet(&text, base).map_err(|e| CmdError::User(e.to_string()))
}

fn pick<'a, T>(
    items: &'a [T],
    name: Option<&str>,
    kind: &str,
    of: impl Fn(&T) -> &str,
) -> Result<&'a T, CmdError> {
    match name {
        Some(n) => items
            .iter()
            .find(|i| of(i) == n)
            .ok_or_else(|| CmdError::User(format!("no {kind} section named {n:?}"))),
        None if items.len() == 1 => Ok(&items[0]),
        None if items.is_empty() => Err(CmdError::User(format!("config defines no {kind}"))),
        None => Err(CmdError::User(format!(
            "config defines several {kind}s; pass --name"
        ))),
    }
}

fn registration_loop(
    client: Client,
    parent: String,
    endpoint: String,
    kind: ChildKind,
    ttl_s: u64,
    stop: Arc<AtomicBool>,
) {
    std::thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            if let Err(e) = attach_to_parent(&client, &parent, &endpoint, kind, Some(ttl_s)) {
                eprintln!("attach to {parent}: {e}");
            }
            std::thread::sleep(Duration::from_secs(ttl_s.max(1)));
        }
    });
}

/// Runs a cluster daemon (gatekeeper + manager + scheduler + provider)
/// until the stop flag is raised. Returns after shutdown.
pub fn run_cluster(
    fleet: &FleetConfig,
    name: Option<&str>,
    stop: Arc<AtomicBool>,
) -> Result<(), CmdError> {
    let section = pick(&fleet.clusters, name, "cluster", |c| &c.name)?;
    let base = section
        .workdir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("ng-cluster-{}", section.name)));
    let mut cfg = ClusterConfig::new(&section.name, &section.country, &base);
    cfg.contact = format!("ng://{}:{}", section.host, section.port);
    cfg.queues = section.queues.clone();
    cfg.gridmap = section.gridmap.clone();
    cfg.runtime_environments = section.runtime_environments.clone();
    cfg.local_se_paths = section.local_se.clone();
    cfg.rc_endpoint = section.rc.as_deref().and_then(|r| fleet.rc_endpoint(r));
    cfg.parent_giis = section
        .parent_giis
        .as_deref()
        .and_then(|p| fleet.giis_endpoint(p));
    cfg.registration_ttl_s = section.ttl_s;
    cfg.default_lifetime_s = section.lifetime_s;
    cfg.upload_timeout_s = section.upload_timeout_s;
    cfg.stage_retries = section.retries;
    cfg.retry_backoff_ms = section.retry_backoff_ms;
    let client = Client::new(cfg.subject.clone(), ServiceRole::Cluster, Transport::Tcp);
    let cluster = Cluster::new(cfg, Arc::new(SystemClock), client)
        .map_err(|e| CmdError::User(e.to_string()))?;
    let handle = serve_tcp(&format!("0.0.0.0:{}", section.port), cluster.clone())
        .map_err(|e| CmdError::User(format!("cannot bind port {}: {e}", section.port)))?;
    eprintln!("ng-cluster {}: serving on {}", section.name, handle.addr);
    let tick = Duration::from_millis(section.tick_ms.max(10));
    while !stop.load(Ordering::SeqCst) {
        cluster.pump_once();
        std::thread::sleep(tick);
    }
    handle.shutdown();
    Ok(())
}

pub fn run_se(
    fleet: &FleetConfig,
    name: Option<&str>,
    stop: Arc<AtomicBool>,
) -> Result<(), CmdError> {
    let section = pick(&fleet.ses, name, "se", |s| &s.name)?;
    let root = section
        .root
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("ng-se-{}", section.name)));
    let se = Arc::new(
        StorageElement::new(SeConfig {
            name: section.name.clone(),
            country: section.country.clone(),
            root,
            acl: section.acl.clone(),
            capacity_mb: section.capacity_mb,
            base_url: format!("ngse://{}:{}", section.host, section.port),
        })
        .map_err(|e| CmdError::User(e.to_string()))?,
    );
    let handle = serve_tcp(&format!("0.0.0.0:{}", section.port), se)
        .map_err(|e| CmdError::User(format!("cannot bind port {}: {e}", section.port)))?;
    eprintln!("ng-se {}: serving on {}", section.name, handle.addr);
    if let Some(parent) = section
        .parent_giis
        .as_deref()
        .and_then(|p| fleet.giis_endpoint(p))
    {
        let client = Client::new(
            Subject::new(format!("/O=Grid/CN=service-{}", section.name)).unwrap(),
            ServiceRole::Se,
            Transport::Tcp,
        );
        registration_loop(
            client,
            parent,
            format!("ngse://{}:{}", section.host, section.port),
            ChildKind::Gris,
            section.ttl_s,
            stop.clone(),
        );
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    handle.shutdown();
    Ok(())
}

pub fn run_rc(
    fleet: &FleetConfig,
    name: Option<&str>,
    stop: Arc<AtomicBool>,
) -> Result<(), CmdError> {
    let section = pick(&fleet.rcs, name, "rc", |r| &r.name)?;
    let log = section
        .log
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("ng-rc-{}.log", section.name)));
    let rc = Arc::new(
        ReplicaCatalog::open(RcConfig {
            name: section.name.clone(),
            country: section.country.clone(),
            log_path: log,
            writers: section.writers.clone(),
            base_url: format!("ng://{}:{}", section.host, section.port),
        })
        .map_err(|e| CmdError::User(e.to_string()))?,
    );
    let handle = serve_tcp(&format!("0.0.0.0:{}", section.port), rc)
        .map_err(|e| CmdError::User(format!("cannot bind port {}: {e}", section.port)))?;
    eprintln!("ng-rc {}: serving on {}", section.name, handle.addr);
    if let Some(parent) = section
        .parent_giis
        .as_deref()
        .and_then(|p| fleet.giis_endpoint(p))
    {
        let client = Client::new(
            Subject::new(format!("/O=Grid/CN=service-{}", section.name)).unwrap(),
            ServiceRole::Rc,
            Transport::Tcp,
        );
        registration_loop(
            client,
            parent,
            format!("ng://{}:{}", section.host, section.port),
            ChildKind::Gris,
            section.ttl_s,
            stop.clone(),
        );
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    handle.shutdown();
    Ok(())
}

pub fn run_giis(
    fleet: &FleetConfig,
    name: Option<&str>,
    stop: Arc<AtomicBool>,
) -> Result<(), CmdError> {
    let section = pick(&fleet.giises, name, "giis", |g| &g.name)?;
    let subject = Subject::new(format!("/O=Grid/CN=service-{}", section.name)).unwrap();
    let client = Client::new(subject.clone(), ServiceRole::Giis, Transport::Tcp);
    let giis = Arc::new(Giis::new(
        GiisConfig {
            name: section.name.clone(),
            country: section.country.clone(),
            default_ttl_ms: section.ttl_s * 1_000,
            allow: section.allow.clone(),
            subject,
        },
        Arc::new(SystemClock),
        client.clone(),
    ));
    let handle = serve_tcp(&format!("0.0.0.0:{}", section.port), giis)
        .map_err(|e| CmdError::User(format!("cannot bind port {}: {e}", section.port)))?;
    eprintln!("ng-giis {}: serving on {}", section.name, handle.addr);
    if let Some(parent) = section
        .parent_giis
        .as_deref()
        .and_then(|p| fleet.giis_endpoint(p))
    {
        registration_loop(
            client,
            parent,
            format!("ng://{}:{}", section.host, section.port),
            ChildKind::Giis,
            section.ttl_s,
            stop.clone(),
        );
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    handle.shutdown();
    Ok(())
}

/// A stop flag for the daemon loops. The binaries never raise it — a
/// signal terminates the process — but tests stop daemons through it.
pub fn stop_flag() -> Arc<AtomicBool> {
    Arc::new(AtomicBool::new(false))
}

//! The gatekeeper and grid manager: admission, the per-job state
//! machine, staging, the local scheduler driver, output registration and
//! cleanup.
//!
//! Job state lives in two places that are kept consistent: an in-memory
//! record table owned by the cluster process and one directory per job
//! under `<control>/jobs/<gridid>/` holding small record files (`status`,
//! `desc`, `owner`, ...). Every file is written atomically
//! (write-temp-then-rename) and the `status` file is always written
//! last, so a restart can rebuild every record from the directory alone
//! and resume from the recorded state.

mod cluster;

pub use cluster::{Cluster, ClusterConfig, GmEvent};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::wire::Subject;
use crate::xrsl::{self, JobDescription};

#[derive(Debug, Error)]
pub enum GmError {
    #[error("status directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt job record {gridid}: {detail}")]
    Corrupt { gridid: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JobState {
    Accepted,
    Preparing,
    InlrmsQ,
    InlrmsR,
    Finishing,
    Finished,
    Failed,
    Canceling,
    Deleted,
}

pub const JOB_STATES: [JobState; 9] = [
    JobState::Accepted,
    JobState::Preparing,
    JobState::InlrmsQ,
    JobState::InlrmsR,
    JobState::Finishing,
    JobState::Finished,
    JobState::Failed,
    JobState::Canceling,
    JobState::Deleted,
];

impl JobState {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Accepted => "ACCEPTED",
            JobState::Preparing => "PREPARING",
            JobState::InlrmsQ => "INLRMS:Q",
            JobState::InlrmsR => "INLRMS:R",
            JobState::Finishing => "FINISHING",
            JobState::Finished => "FINISHED",
            JobState::Failed => "FAILED",
            JobState::Canceling => "CANCELING",
            JobState::Deleted => "DELETED",
        }
    }

    pub fn parse(s: &str) -> Option<JobState> {
        JOB_STATES.iter().copied().find(|st| st.as_str() == s)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            JobState::Finished | JobState::Failed | JobState::Deleted
        )
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that can happen to a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JobEvent {
    /// The executor picks the job up (start preparing; finish a cancel).
    Advance,
    /// All input files are in place and the job is in the local queue.
    StagingDone,
    /// The local scheduler reports the job running.
    LrmsRunning,
    /// The local scheduler reports the job ended.
    LrmsExited,
    /// Output files are delivered and registered.
    StageOutDone,
    /// A cancel request arrived.
    Cancel,
    /// Staging, the scheduler or post-processing failed.
    Failure,
    /// A terminal job outlived its retention period.
    LifetimeExpired,
}

pub const JOB_EVENTS: [JobEvent; 8] = [
    JobEvent::Advance,
    JobEvent::StagingDone,
    JobEvent::LrmsRunning,
    JobEvent::LrmsExited,
    JobEvent::StageOutDone,
    JobEvent::Cancel,
    JobEvent::Failure,
    JobEvent::LifetimeExpired,
];

/// The complete legal transition set. Anything not listed here is
/// ignored by the executor: illegal events never change state.
pub fn next_state(state: JobState, event: JobEvent) -> Option<JobState> {
    use JobEvent::*;
    use JobState::*;
    match (state, event) {
        (Accepted, Advance) => Some(Preparing),
        (Preparing, StagingDone) => Some(InlrmsQ),
        (Preparing, Failure) => Some(Failed),
        (InlrmsQ, LrmsRunning) => Some(InlrmsR),
        (InlrmsQ, Failure) => Some(Failed),
        (InlrmsR, LrmsExited) => Some(Finishing),
        (InlrmsR, Failure) => Some(Failed),
        (Finishing, StageOutDone) => Some(Finished),
        (Finishing, Failure) => Some(Failed),
        (Accepted | Preparing | InlrmsQ | InlrmsR | Finishing, Cancel) => Some(Canceling),
        (Canceling, Advance) => Some(Failed),
        (Finished | Failed, LifetimeExpired) => Some(Deleted),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct JobRecord {
    /// `<cluster-host>:<counter>-<6-hex-random>`, globally unique.
    pub gridid: String,
    pub owner: Subject,
    pub job: JobDescription,
    pub state: JobState,
    pub session_dir: PathBuf,
    /// The queue the job was resolved onto at admission.
    pub queue: String,
    pub local_id: Option<u64>,
    pub exit_code: Option<i32>,
    pub failure_reason: String,
    pub created_ms: u64,
    pub modified_ms: u64,
    pub lifetime_s: u64,
    pub clean_requested: bool,
}

impl JobRecord {
    /// The counter component of the grid id.
    pub fn counter(gridid: &str) -> Option<u64> {
        let (_, rest) = gridid.rsplit_once(':')?;
        let (counter, _) = rest.split_once('-')?;
        counter.parse().ok()
    }
}

/// One directory of small record files per job, written atomically.
pub struct StatusDir {
    jobs_root: PathBuf,
}

fn write_atomic(path: &Path, content: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)
}

impl StatusDir {
    pub fn open(control_dir: &Path) -> std::io::Result<Self> {
        let jobs_root = control_dir.join("jobs");
        fs::create_dir_all(&jobs_root)?;
        Ok(StatusDir { jobs_root })
    }

    pub fn job_dir(&self, gridid: &str) -> PathBuf {
        self.jobs_root.join(gridid)
    }

    fn put(&self, gridid: &str, name: &str, content: &str) -> std::io::Result<()> {
        write_atomic(&self.job_dir(gridid).join(name), content)
    }

    fn get(&self, gridid: &str, name: &str) -> Option<String> {
        fs::read_to_string(self.job_dir(gridid).join(name))
            .ok()
            .map(|s| s.trim_end_matches('\n').to_string())
    }

    /// Writes the full record; the status file goes last so a crash
    /// mid-save leaves no committed record.
    pub fn save_new(&self, rec: &JobRecord) -> std::io::Result<()> {
        fs::create_dir_all(self.job_dir(&rec.gridid))?;
        self.put(
            &rec.gridid,
            "desc",
            &format!("{}\n", xrsl::serialize(&rec.job)),
        )?;
        self.put(&rec.gridid, "owner", &format!("{}\n", rec.owner.dn()))?;
        self.put(
            &rec.gridid,
            "session",
            &format!("{}\n", rec.session_dir.display()),
        )?;
        self.put(&rec.gridid, "created", &format!("{}\n", rec.created_ms))?;
        self.put(&rec.gridid, "modified", &format!("{}\n", rec.modified_ms))?;
        self.put(&rec.gridid, "lifetime", &format!("{}\n", rec.lifetime_s))?;
        self.put(&rec.gridid, "queue", &format!("{}\n", rec.queue))?;
        self.put(&rec.gridid, "status", &format!("{}\n", rec.state.as_str()))
    }

    /// Persists the mutable fields of a transition; aux files first,
    /// `status` last as the commit point.
    pub fn save_transition(&self, rec: &JobRecord) -> std::io::Result<()> {
        if let Some(id) = rec.local_id {
            self.put(&rec.gridid, "localid", &format!("{id}\n"))?;
        }
        if let Some(code) = rec.exit_code {
            self.put(&rec.gridid, "exitcode", &format!("{code}\n"))?;
        }
        if !rec.failure_reason.is_empty() {
            self.put(&rec.gridid, "errors", &format!("{}\n", rec.failure_reason))?;
        }
        if rec.clean_requested {
            self.put(&rec.gridid, "clean", "1\n")?;
        }
        self.put(&rec.gridid, "modified", &format!("{}\n", rec.modified_ms))?;
        self.put(&rec.gridid, "status", &format!("{}\n", rec.state.as_str()))
    }

    pub fn save_local_id(&self, gridid: &str, local_id: u64) -> std::io::Result<()> {
        self.put(gridid, "localid", &format!("{local_id}\n"))
    }

    pub fn remove(&self, gridid: &str) -> std::io::Result<()> {
        let dir = self.job_dir(gridid);
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(())
    }

    /// Rebuilds every committed record. Directories without a status
    /// file are half-created leftovers and are dropped.
    pub fn load_all(&self) -> Result<BTreeMap<String, JobRecord>, GmError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.jobs_root)? {
            let entry = entry?;
            if !entry.path().is_dir() {
                continue;
            }
            let gridid = entry.file_name().to_string_lossy().into_owned();
            let Some(status) = self.get(&gridid, "status") else {
                let _ = fs::remove_dir_all(entry.path());
                continue;
            };
            let corrupt = |detail: &str| GmError::Corrupt {
                gridid: gridid.clone(),
                detail: detail.to_string(),
            };
            let state = JobState::parse(&status).ok_or_else(|| corrupt("bad status"))?;
            if state == JobState::Deleted {
                let _ = fs::remove_dir_all(entry.path());
                continue;
            }
            let desc = self
                .get(&gridid, "desc")
                .ok_or_else(|| corrupt("missing desc"))?;
            let job = xrsl::parse_job(&desc).map_err(|e| corrupt(&format!("bad desc: {e}")))?;
            let owner_dn = self
                .get(&gridid, "owner")
                .ok_or_else(|| corrupt("missing owner"))?;
            let owner = Subject::new(owner_dn).map_err(|e| corrupt(&format!("bad owner: {e}")))?;
            let session_dir = PathBuf::from(
                self.get(&gridid, "session")
                    .ok_or_else(|| corrupt("missing session"))?,
            );
            let rec = JobRecord {
                owner,
                job,
                state,
                session_dir,
                queue: self.get(&gridid, "queue").unwrap_or_default(),
                local_id: self.get(&gridid, "localid").and_then(|s| s.parse().ok()),
                exit_code: self.get(&gridid, "exitcode").and_then(|s| s.parse().ok()),
                failure_reason: self.get(&gridid, "errors").unwrap_or_default(),
                created_ms: self
                    .get(&gridid, "created")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0),
                modified_ms: self
                    .get(&gridid, "modified")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0),
                lifetime_s: self
                    .get(&gridid, "lifetime")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0),
                clean_requested: self.get(&gridid, "clean").is_some(),
                gridid,
            };
            out.insert(rec.gridid.clone(), rec);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn state_names_round_trip() {
        for s in JOB_STATES {
            assert_eq!(JobState::parse(s.as_str()), Some(s));
        }
        assert_eq!(JobState::parse("NOPE"), None);
    }

    #[test]
    fn transition_table_is_exactly_the_legal_set() {
        use JobEvent::*;
        use JobState::*;
        let legal: BTreeSet<(&str, &str, &str)> = [
            ("ACCEPTED", "Advance", "PREPARING"),
            ("PREPARING", "StagingDone", "INLRMS:Q"),
            ("PREPARING", "Failure", "FAILED"),
            ("INLRMS:Q", "LrmsRunning", "INLRMS:R"),
            ("INLRMS:Q", "Failure", "FAILED"),
            ("INLRMS:R", "LrmsExited", "FINISHING"),
            ("INLRMS:R", "Failure", "FAILED"),
            ("FINISHING", "StageOutDone", "FINISHED"),
            ("FINISHING", "Failure", "FAILED"),
            ("ACCEPTED", "Cancel", "CANCELING"),
            ("PREPARING", "Cancel", "CANCELING"),
            ("INLRMS:Q", "Cancel", "CANCELING"),
            ("INLRMS:R", "Cancel", "CANCELING"),
            ("FINISHING", "Cancel", "CANCELING"),
            ("CANCELING", "Advance", "FAILED"),
            ("FINISHED", "LifetimeExpired", "DELETED"),
            ("FAILED", "LifetimeExpired", "DELETED"),
        ]
        .into_iter()
        .collect();
        for state in JOB_STATES {
            for event in JOB_EVENTS {
                let expected = legal
                    .iter()
                    .find(|(s, e, _)| *s == state.as_str() && *e == format!("{event:?}"))
                    .map(|(_, _, to)| *to);
                let actual = next_state(state, event).map(|s| s.as_str());
                assert_eq!(actual, expected, "{state} × {event:?}");
            }
        }
        // DELETED accepts nothing.
        for event in JOB_EVENTS {
            assert_eq!(next_state(Deleted, event), None);
        }
        // Cancel is accepted from every non-terminal state except CANCELING.
        for state in [Accepted, Preparing, InlrmsQ, InlrmsR, Finishing] {
            assert_eq!(next_state(state, Cancel), Some(Canceling));
        }
    }

    #[test]
    fn counter_parses_from_gridid() {
        assert_eq!(JobRecord::counter("alpha:17-a3f2b1"), Some(17));
        assert_eq!(JobRecord::counter("host:with:colons:3-ffffff"), Some(3));
        assert_eq!(JobRecord::counter("garbage"), None);
    }

    fn sample_record(dir: &Path, state: JobState) -> JobRecord {
        JobRecord {
            gridid: "alpha:1-abc123".to_string(),
            owner: Subject::new("/O=Grid/CN=A").unwrap(),
            job: xrsl::parse_job(r#"&(executable="run.sh")(cputime="60")"#).unwrap(),
            state,
            session_dir: dir.join("sessions/alpha:1-abc123"),
            queue: "short".to_string(),
            local_id: None,
            exit_code: None,
            failure_reason: String::new(),
            created_ms: 1_000,
            modified_ms: 2_000,
            lifetime_s: 3_600,
            clean_requested: false,
        }
    }

    #[test]
    fn status_dir_round_trips_records() {
        let dir = tempfile::tempdir().unwrap();
        let sd = StatusDir::open(dir.path()).unwrap();
        let mut rec = sample_record(dir.path(), JobState::Accepted);
        sd.save_new(&rec).unwrap();

        rec.state = JobState::InlrmsQ;
        rec.local_id = Some(7);
        rec.modified_ms = 3_000;
        sd.save_transition(&rec).unwrap();

        let loaded = sd.load_all().unwrap();
        assert_eq!(loaded.len(), 1);
        let got = &loaded["alpha:1-abc123"];
        assert_eq!(got.state, JobState::InlrmsQ);
        assert_eq!(got.local_id, Some(7));
        assert_eq!(got.queue, "short");
        assert_eq!(got.job, rec.job);
        assert_eq!(got.owner, rec.owner);
        assert_eq!(got.modified_ms, 3_000);
    }

    #[test]
    fn half_created_records_are_dropped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let sd = StatusDir::open(dir.path()).unwrap();
        fs::create_dir_all(sd.job_dir("alpha:9-dead00")).unwrap();
        fs::write(
            sd.job_dir("alpha:9-dead00").join("desc"),
            "&(executable=\"x\")\n",
        )
        .unwrap();
        let loaded = sd.load_all().unwrap();
        assert!(loaded.is_empty());
        assert!(!sd.job_dir("alpha:9-dead00").exists());
    }

    #[test]
    fn remove_erases_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let sd = StatusDir::open(dir.path()).unwrap();
        let rec = sample_record(dir.path(), JobState::Finished);
        sd.save_new(&rec).unwrap();
        sd.remove(&rec.gridid).unwrap();
        assert!(sd.load_all().unwrap().is_empty());
    }
}

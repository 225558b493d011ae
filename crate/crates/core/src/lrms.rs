//! The local resource management system: named queues over a fixed pool
//! of CPU slots, FIFO within a queue and round-robin across queues, with
//! real subprocess execution of job scripts inside their session
//! directories.
//!
//! The cputime limit is enforced as wall-clock time measured on the
//! clock passed to [`Lrms::tick`]; a job killed for exceeding it exits
//! 152, a deleted job exits 153. The memory limit is recorded but not
//! enforced. Job scripts run via `/bin/sh` with a minimal environment
//! and the session directory as the working directory — they are handed
//! nothing that points outside it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use thiserror::Error;

pub const EXIT_CPUTIME: i32 = 152;
pub const EXIT_DELETED: i32 = 153;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LrmsError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("{limit} {requested} exceeds queue maximum {maximum}")]
    LimitExceeded {
        limit: &'static str,
        requested: u64,
        maximum: u64,
    },
    #[error("unknown job id {0}")]
    UnknownJob(u64),
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub name: String,
    pub max_cputime_s: u64,
    pub max_memory_mb: u64,
    pub max_disk_mb: u64,
    pub cpus: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalState {
    Queued,
    Running,
    Ended,
}

impl LocalState {
    pub fn as_char(&self) -> char {
        match self {
            LocalState::Queued => 'Q',
            LocalState::Running => 'R',
            LocalState::Ended => 'E',
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalJob {
    pub local_id: u64,
    pub script: PathBuf,
    pub workdir: PathBuf,
    pub queue: String,
    pub cputime_s: u64,
    pub memory_mb: u64,
    pub state: LocalState,
    pub exit_code: Option<i32>,
    pub pid: Option<u32>,
    pub submitted_ms: u64,
    pub started_ms: Option<u64>,
    pub ended_ms: Option<u64>,
}

struct Slot {
    info: LocalJob,
    child: Option<Child>,
}

struct LrmsState {
    jobs: BTreeMap<u64, Slot>,
    next_id: u64,
    rr_cursor: usize,
}

pub struct Lrms {
    queues: Vec<QueueConfig>,
    state: Mutex<LrmsState>,
}

impl Lrms {
    pub fn new(queues: Vec<QueueConfig>) -> Self {
        Lrms {
            queues,
            state: Mutex::new(LrmsState {
                jobs: BTreeMap::new(),
                next_id: 1,
                rr_cursor: 0,
            }),
        }
    }

    pub fn queues(&self) -> &[QueueConfig] {
        &self.queues
    }

    pub fn queue(&self, name: &str) -> Option<&QueueConfig> {
        self.queues.iter().find(|q| q.name == name)
    }

    pub fn total_cpus(&self) -> u64 {
        self.queues.iter().map(|q| q.cpus).sum()
    }

    /// Enqueues a script; returns a fresh increasing local id.
    pub fn qsub(
        &self,
        script: PathBuf,
        workdir: PathBuf,
        queue: &str,
        cputime_s: u64,
        memory_mb: u64,
        now_ms: u64,
    ) -> Result<u64, LrmsError> {
        let qc = self
            .queue(queue)
            .ok_or_else(|| LrmsError::UnknownQueue(queue.to_string()))?;
        if cputime_s > qc.max_cputime_s {
            return Err(LrmsError::LimitExceeded {
                limit: "cputime",
                requested: cputime_s,
                maximum: qc.max_cputime_s,
            });
        }
        if memory_mb > qc.max_memory_mb {
            return Err(LrmsError::LimitExceeded {
                limit: "memory",
                requested: memory_mb,
                maximum: qc.max_memory_mb,
            });
        }
        let mut state = self.state.lock().unwrap();
        let local_id = state.next_id;
        state.next_id += 1;
        state.jobs.insert(
            local_id,
            Slot {
                info: LocalJob {
                    local_id,
                    script,
                    workdir,
                    queue: queue.to_string(),
                    cputime_s,
                    memory_mb,
                    state: LocalState::Queued,
                    exit_code: None,
                    pid: None,
                    submitted_ms: now_ms,
                    started_ms: None,
                    ended_ms: None,
                },
                child: None,
            },
        );
        Ok(local_id)
    }

    pub fn qstat(&self) -> Vec<LocalJob> {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .map(|s| s.info.clone())
            .collect()
    }

    pub fn qstat_one(&self, local_id: u64) -> Option<LocalJob> {
        self.state
            .lock()
            .unwrap()
            .jobs
            .get(&local_id)
            .map(|s| s.info.clone())
    }

    /// Cancels a job: a queued job ends without running, a running one is
    /// killed; both end with exit code 153.
    pub fn qdel(&self, local_id: u64, now_ms: u64) -> Result<(), LrmsError> {
        let mut state = self.state.lock().unwrap();
        let slot = state
            .jobs
            .get_mut(&local_id)
            .ok_or(LrmsError::UnknownJob(local_id))?;
        match slot.info.state {
            LocalState::Ended => Ok(()),
            LocalState::Queued => {
                slot.info.state = LocalState::Ended;
                slot.info.exit_code = Some(EXIT_DELETED);
                slot.info.ended_ms = Some(now_ms);
                Ok(())
            }
            LocalState::Running => {
                if let Some(child) = slot.child.as_mut() {
                    let _ = child.kill();
                    let _ = child.wait();
                }
                slot.child = None;
                slot.info.state = LocalState::Ended;
                slot.info.exit_code = Some(EXIT_DELETED);
                slot.info.ended_ms = Some(now_ms);
                Ok(())
            }
        }
    }

    pub fn running_in_queue(&self, queue: &str) -> u64 {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .filter(|s| s.info.queue == queue && s.info.state == LocalState::Running)
            .count() as u64
    }

    pub fn queued_in_queue(&self, queue: &str) -> u64 {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .filter(|s| s.info.queue == queue && s.info.state == LocalState::Queued)
            .count() as u64
    }

    pub fn total_running(&self) -> u64 {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .filter(|s| s.info.state == LocalState::Running)
            .count() as u64
    }

    /// One scheduler pass: reap finished processes, kill over-limit jobs,
    /// then start queued jobs while reserved CPUs are free — oldest first
    /// within a queue, round-robin across queues. Returns the ids that
    /// changed state.
    pub fn tick(&self, now_ms: u64) -> Vec<u64> {
        let mut state = self.state.lock().unwrap();
        let mut changed = Vec::new();

        for slot in state.jobs.values_mut() {
            if slot.info.state != LocalState::Running {
                continue;
            }
            let finished = match slot.child.as_mut() {
                Some(child) => match child.try_wait() {
                    Ok(Some(status)) => {
                        slot.info.exit_code = Some(exit_code_of(status));
                        true
                    }
                    Ok(None) => false,
                    Err(_) => {
                        slot.info.exit_code = Some(1);
                        true
                    }
                },
                None => {
                    slot.info.exit_code = Some(1);
                    true
                }
            };
            if finished {
                slot.child = None;
                slot.info.state = LocalState::Ended;
                slot.info.ended_ms = Some(now_ms);
                changed.push(slot.info.local_id);
                continue;
            }
            let over_limit = slot.info.cputime_s > 0
                && slot
                    .info
                    .started_ms
                    .is_some_and(|t| now_ms.saturating_sub(t) >= slot.info.cputime_s * 1_000);
            if over_limit {
                if let Some(child) = slot.child.as_mut() {
                    let _ = child.kill();
                    let _ = child.wait();
                }
                slot.child = None;
                slot.info.state = LocalState::Ended;
                slot.info.exit_code = Some(EXIT_CPUTIME);
                slot.info.ended_ms = Some(now_ms);
                changed.push(slot.info.local_id);
            }
        }

        // Start phase: cycle queues from the round-robin cursor until a
        // full pass starts nothing.
        loop {
            let mut started = false;
            for i in 0..self.queues.len() {
                let qi = (state.rr_cursor + i) % self.queues.len();
                let qc = &self.queues[qi];
                let running = state
                    .jobs
                    .values()
                    .filter(|s| s.info.queue == qc.name && s.info.state == LocalState::Running)
                    .count() as u64;
                if running >= qc.cpus {
                    continue;
                }
                let next = state
                    .jobs
                    .values()
                    .filter(|s| s.info.queue == qc.name && s.info.state == LocalState::Queued)
                    .map(|s| s.info.local_id)
                    .min();
                let Some(id) = next else { continue };
                let slot = state.jobs.get_mut(&id).expect("job just found");
                match spawn_job(&slot.info) {
                    Ok(child) => {
                        slot.info.pid = Some(child.id());
                        slot.child = Some(child);
                        slot.info.state = LocalState::Running;
                        slot.info.started_ms = Some(now_ms);
                    }
                    Err(_) => {
                        slot.info.state = LocalState::Ended;
                        slot.info.exit_code = Some(127);
                        slot.info.ended_ms = Some(now_ms);
                    }
                }
                changed.push(id);
                state.rr_cursor = (qi + 1) % self.queues.len();
                started = true;
                break;
            }
            if !started {
                break;
            }
        }

        debug_assert!(
            state
                .jobs
                .values()
                .filter(|s| s.info.state == LocalState::Running)
                .count() as u64
                <= self.total_cpus()
        );
        changed
    }

    /// Drops ended jobs from the table (the grid manager keeps its own
    /// records; this is housekeeping for long-lived daemons).
    pub fn reap_ended(&self, before_ms: u64) {
        let mut state = self.state.lock().unwrap();
        state.jobs.retain(|_, s| {
            s.info.state != LocalState::Ended || s.info.ended_ms.is_none_or(|t| t >= before_ms)
        });
    }
}

fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    status.code().unwrap_or(1)
}

fn spawn_job(job: &LocalJob) -> std::io::Result<Child> {
    let stdout = std::fs::File::create(job.workdir.join(".lrms.out"))?;
    let stderr = std::fs::File::create(job.workdir.join(".lrms.err"))?;
    Command::new("/bin/sh")
        .arg(&job.script)
        .current_dir(&job.workdir)
        .env_clear()
        .env("PATH", "/usr/bin:/bin")
        .env("HOME", &job.workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, SystemTime, UNIX_EPOCH};

    fn now_ms() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap()
            .as_millis() as u64
    }

    fn one_cpu_lrms() -> Lrms {
        Lrms::new(vec![QueueConfig {
            name: "short".to_string(),
            max_cputime_s: 100,
            max_memory_mb: 512,
            max_disk_mb: 1024,
            cpus: 1,
        }])
    }

    fn write_script(dir: &std::path::Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn wait_for_end(lrms: &Lrms, id: u64, max_ms: u64) -> LocalJob {
        let deadline = now_ms() + max_ms;
        loop {
            lrms.tick(now_ms());
            let job = lrms.qstat_one(id).unwrap();
            if job.state == LocalState::Ended {
                return job;
            }
            assert!(now_ms() < deadline, "job {id} did not end in {max_ms} ms");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    #[test]
    fn qsub_respects_queue_limits() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "exit 0\n");
        assert!(lrms
            .qsub(script.clone(), dir.path().into(), "short", 60, 64, 0)
            .is_ok());
        assert_eq!(
            lrms.qsub(script.clone(), dir.path().into(), "short", 200, 64, 0),
            Err(LrmsError::LimitExceeded {
                limit: "cputime",
                requested: 200,
                maximum: 100
            })
        );
        assert_eq!(
            lrms.qsub(script, dir.path().into(), "long", 10, 64, 0),
            Err(LrmsError::UnknownQueue("long".to_string()))
        );
    }

    #[test]
    fn ids_are_fresh_and_increasing() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "exit 0\n");
        let a = lrms
            .qsub(script.clone(), dir.path().into(), "short", 1, 1, 0)
            .unwrap();
        let b = lrms
            .qsub(script, dir.path().into(), "short", 1, 1, 0)
            .unwrap();
        assert!(b > a);
    }

    #[test]
    fn exit_code_propagates() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "exit 7\n");
        let id = lrms
            .qsub(script, dir.path().into(), "short", 10, 1, now_ms())
            .unwrap();
        let job = wait_for_end(&lrms, id, 5_000);
        assert_eq!(job.exit_code, Some(7));
    }

    #[test]
    fn single_slot_runs_fifo() {
        let lrms = one_cpu_lrms();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let s1 = write_script(dir1.path(), "a.sh", "sleep 0.2\n");
        let s2 = write_script(dir2.path(), "b.sh", "exit 0\n");
        let first = lrms
            .qsub(s1, dir1.path().into(), "short", 30, 1, now_ms())
            .unwrap();
        let second = lrms
            .qsub(s2, dir2.path().into(), "short", 30, 1, now_ms())
            .unwrap();
        lrms.tick(now_ms());
        assert_eq!(lrms.qstat_one(first).unwrap().state, LocalState::Running);
        assert_eq!(lrms.qstat_one(second).unwrap().state, LocalState::Queued);
        assert!(lrms.total_running() <= 1);
        let j2 = wait_for_end(&lrms, second, 5_000);
        let j1 = lrms.qstat_one(first).unwrap();
        // The second started only after the first ended.
        assert!(j2.started_ms.unwrap() >= j1.ended_ms.unwrap());
    }

    #[test]
    fn cputime_limit_kills_with_152() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "sleep 10\n");
        let id = lrms
            .qsub(script, dir.path().into(), "short", 1, 1, now_ms())
            .unwrap();
        let t0 = now_ms();
        let job = wait_for_end(&lrms, id, 5_000);
        assert_eq!(job.exit_code, Some(EXIT_CPUTIME));
        let elapsed = job.ended_ms.unwrap() - t0;
        assert!((500..3_000).contains(&elapsed), "killed after {elapsed} ms");
    }

    #[test]
    fn qdel_on_queued_job_ends_it_without_running() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let blocker = write_script(dir.path(), "a.sh", "sleep 5\n");
        let victim = write_script(dir.path(), "b.sh", "exit 0\n");
        let a = lrms
            .qsub(blocker, dir.path().into(), "short", 30, 1, now_ms())
            .unwrap();
        let b = lrms
            .qsub(victim, dir.path().into(), "short", 30, 1, now_ms())
            .unwrap();
        lrms.tick(now_ms());
        lrms.qdel(b, now_ms()).unwrap();
        let job = lrms.qstat_one(b).unwrap();
        assert_eq!(job.state, LocalState::Ended);
        assert_eq!(job.exit_code, Some(EXIT_DELETED));
        assert!(job.started_ms.is_none());
        lrms.qdel(a, now_ms()).unwrap();
    }

    #[test]
    fn qdel_on_running_job_kills_the_process() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "sleep 30\n");
        let id = lrms
            .qsub(script, dir.path().into(), "short", 60, 1, now_ms())
            .unwrap();
        lrms.tick(now_ms());
        let pid = lrms.qstat_one(id).unwrap().pid.unwrap();
        lrms.qdel(id, now_ms()).unwrap();
        let job = lrms.qstat_one(id).unwrap();
        assert_eq!(job.state, LocalState::Ended);
        assert_eq!(job.exit_code, Some(EXIT_DELETED));
        // The process is reaped: signalling it must fail.
        let alive = unsafe { libc::kill(pid as i32, 0) } == 0;
        assert!(!alive, "pid {pid} still alive after qdel");
    }

    #[test]
    fn qdel_unknown_id_errors() {
        let lrms = one_cpu_lrms();
        assert_eq!(lrms.qdel(99, 0), Err(LrmsError::UnknownJob(99)));
    }

    #[test]
    fn round_robin_across_queues_with_fifo_within() {
        let lrms = Lrms::new(vec![
            QueueConfig {
                name: "a".to_string(),
                max_cputime_s: 100,
                max_memory_mb: 512,
                max_disk_mb: 1024,
                cpus: 1,
            },
            QueueConfig {
                name: "b".to_string(),
                max_cputime_s: 100,
                max_memory_mb: 512,
                max_disk_mb: 1024,
                cpus: 1,
            },
        ]);
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "exit 0\n");
        let mut ids = Vec::new();
        for q in ["a", "a", "b", "b"] {
            ids.push(
                lrms.qsub(script.clone(), dir.path().into(), q, 10, 1, now_ms())
                    .unwrap(),
            );
        }
        lrms.tick(now_ms());
        // One slot each: the oldest of each queue runs.
        assert_eq!(lrms.qstat_one(ids[0]).unwrap().state, LocalState::Running);
        assert_eq!(lrms.qstat_one(ids[2]).unwrap().state, LocalState::Running);
        assert_eq!(lrms.qstat_one(ids[1]).unwrap().state, LocalState::Queued);
        assert_eq!(lrms.qstat_one(ids[3]).unwrap().state, LocalState::Queued);
        for id in ids {
            wait_for_end(&lrms, id, 5_000);
        }
    }

    #[test]
    fn start_order_equals_submission_order_within_a_queue() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "exit 0\n");
        let ids: Vec<u64> = (0..4)
            .map(|_| {
                lrms.qsub(script.clone(), dir.path().into(), "short", 10, 1, now_ms())
                    .unwrap()
            })
            .collect();
        for &id in &ids {
            wait_for_end(&lrms, id, 5_000);
        }
        let starts: Vec<u64> = ids
            .iter()
            .map(|&id| lrms.qstat_one(id).unwrap().started_ms.unwrap())
            .collect();
        for w in starts.windows(2) {
            assert!(w[0] <= w[1], "start order broke submission order");
        }
    }

    #[test]
    fn scripts_run_in_their_session_directory() {
        let lrms = one_cpu_lrms();
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "j.sh", "pwd > where.txt\n");
        let id = lrms
            .qsub(script, dir.path().into(), "short", 10, 1, now_ms())
            .unwrap();
        wait_for_end(&lrms, id, 5_000);
        let seen = std::fs::read_to_string(dir.path().join("where.txt")).unwrap();
        assert_eq!(
            std::fs::canonicalize(seen.trim()).unwrap(),
            std::fs::canonicalize(dir.path()).unwrap()
        );
    }
}

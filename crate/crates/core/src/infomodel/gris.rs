//! Per-cluster information provider: turns the cluster's live state into
//! the entry subtree served by its `QUERY /mds` endpoint. Generation is
//! pull-only — providers run at query time, there is no background
//! refresh.

use chrono::{DateTime, SecondsFormat, Utc};

use super::{cluster_dn, dn_hash, Entry, OC_AUTHUSER, OC_CLUSTER, OC_INFO_GROUP, OC_JOB, OC_QUEUE};

#[derive(Debug, Clone)]
pub struct QueueState {
    pub name: String,
    pub max_cputime_s: u64,
    pub max_memory_mb: u64,
    pub max_disk_mb: u64,
    pub cpus: u64,
    pub running: u64,
    pub queued: u64,
}

impl QueueState {
    pub fn free_cpus(&self) -> u64 {
        self.cpus.saturating_sub(self.running)
    }

    /// Queued-job count; local account mappings are not modeled.
    pub fn effective_queue_length(&self) -> u64 {
        self.queued
    }
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub name: String,
    pub country: String,
    pub aliases: Vec<String>,
    pub total_cpus: u64,
    pub free_cpus: u64,
    pub runtime_environments: Vec<String>,
    pub local_se_paths: Vec<String>,
    pub queues: Vec<QueueState>,
    /// Subject patterns from the grid-map.
    pub authorized: Vec<String>,
    /// Gatekeeper contact URL.
    pub contact: String,
}

/// One job as the information system reports it.
#[derive(Debug, Clone)]
pub struct JobInfo {
    pub gridid: String,
    pub owner_dn: String,
    pub status: String,
    pub queue: String,
    pub submitted_ms: u64,
    pub exit_code: Option<i32>,
}

pub fn rfc3339(ms: u64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms as i64)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Emits the cluster subtree: the cluster entry, one queue entry per
/// queue, `jobs`/`users` info-groups under each queue, one authuser
/// entry per authorized subject and one pbsjob entry per job in the
/// queue it was submitted to.
pub fn gris_snapshot(cluster: &ClusterState, jobs: &[JobInfo], users: &[String]) -> Vec<Entry> {
    let cdn = cluster_dn(&cluster.name, &cluster.country);
    let mut entries = Vec::new();

    let mut c = Entry::new(&cdn, OC_CLUSTER);
    c.add("nordugrid-cluster-name", &cluster.name);
    for alias in &cluster.aliases {
        c.add("nordugrid-cluster-aliasname", alias);
    }
    c.add("nordugrid-cluster-contactstring", &cluster.contact);
    c.add(
        "nordugrid-cluster-totalcpus",
        cluster.total_cpus.to_string(),
    );
    c.add("nordugrid-cluster-freecpus", cluster.free_cpus.to_string());
    for rte in &cluster.runtime_environments {
        c.add("nordugrid-cluster-runtimeenvironment", rte);
    }
    for p in &cluster.local_se_paths {
        c.add("nordugrid-cluster-localse", p);
    }
    entries.push(c);

    for queue in &cluster.queues {
        let qdn = format!("nordugrid-pbsqueue-name={},{cdn}", queue.name);
        let mut q = Entry::new(&qdn, OC_QUEUE);
        q.add("nordugrid-pbsqueue-name", &queue.name);
        q.add(
            "nordugrid-pbsqueue-maxcputime",
            queue.max_cputime_s.to_string(),
        );
        q.add(
            "nordugrid-pbsqueue-maxmemory",
            queue.max_memory_mb.to_string(),
        );
        q.add("nordugrid-pbsqueue-maxdisk", queue.max_disk_mb.to_string());
        q.add("nordugrid-pbsqueue-running", queue.running.to_string());
        q.add("nordugrid-pbsqueue-queued", queue.queued.to_string());
        entries.push(q);

        let jobs_dn = format!("nordugrid-info-group-name=jobs,{qdn}");
        entries.push(Entry::new(&jobs_dn, OC_INFO_GROUP).with("nordugrid-info-group-name", "jobs"));
        let users_dn = format!("nordugrid-info-group-name=users,{qdn}");
        entries
            .push(Entry::new(&users_dn, OC_INFO_GROUP).with("nordugrid-info-group-name", "users"));

        for job in jobs.iter().filter(|j| j.queue == queue.name) {
            let jdn = format!("nordugrid-pbsjob-globalid={},{jobs_dn}", job.gridid);
            let mut j = Entry::new(&jdn, OC_JOB);
            j.add("nordugrid-pbsjob-globalid", &job.gridid);
            j.add("nordugrid-pbsjob-globalowner", &job.owner_dn);
            j.add("nordugrid-pbsjob-status", &job.status);
            j.add("nordugrid-pbsjob-queue", &job.queue);
            j.add("nordugrid-pbsjob-submissiontime", rfc3339(job.submitted_ms));
            if let Some(code) = job.exit_code {
                j.add("nordugrid-pbsjob-exitcode", code.to_string());
            }
            entries.push(j);
        }

        // Per-user view: free CPUs for the user in this queue and the
        // effective queue length they would see.
        let user_free = queue.free_cpus().min(cluster.free_cpus);
        for user in users {
            let udn = format!("nordugrid-authuser-sn={},{users_dn}", dn_hash(user));
            let mut u = Entry::new(&udn, OC_AUTHUSER);
            u.add("nordugrid-authuser-sn", dn_hash(user));
            u.add("nordugrid-authuser-name", user);
            u.add("nordugrid-authuser-freecpus", user_free.to_string());
            u.add(
                "nordugrid-authuser-queuelength",
                queue.effective_queue_length().to_string(),
            );
            entries.push(u);
        }
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn one_queue_cluster() -> ClusterState {
        ClusterState {
            name: "alpha".to_string(),
            country: "dk".to_string(),
            aliases: vec![],
            total_cpus: 2,
            free_cpus: 2,
            runtime_environments: vec!["OS/LINUX-2.4".to_string()],
            local_se_paths: vec![],
            queues: vec![QueueState {
                name: "short".to_string(),
                max_cputime_s: 600,
                max_memory_mb: 512,
                max_disk_mb: 1024,
                cpus: 2,
                running: 0,
                queued: 0,
            }],
            authorized: vec!["/O=Grid/CN=A".to_string()],
            contact: "ng://alpha:39000".to_string(),
        }
    }

    #[test]
    fn empty_cluster_subtree_has_five_entries() {
        // cluster + queue + two info-groups + one authuser
        let c = one_queue_cluster();
        let entries = gris_snapshot(&c, &[], &c.authorized);
        assert_eq!(entries.len(), 5);
        let classes: Vec<&str> = entries.iter().filter_map(|e| e.objectclass()).collect();
        assert_eq!(
            classes,
            vec![
                OC_CLUSTER,
                OC_QUEUE,
                OC_INFO_GROUP,
                OC_INFO_GROUP,
                OC_AUTHUSER
            ]
        );
    }

    #[test]
    fn running_job_appears_with_its_status() {
        let c = one_queue_cluster();
        let job = JobInfo {
            gridid: "alpha:1-abc123".to_string(),
            owner_dn: "/O=Grid/CN=A".to_string(),
            status: "INLRMS:R".to_string(),
            queue: "short".to_string(),
            submitted_ms: 0,
            exit_code: None,
        };
        let entries = gris_snapshot(&c, &[job], &c.authorized);
        let j = entries
            .iter()
            .find(|e| e.objectclass() == Some(OC_JOB))
            .expect("job entry present");
        assert_eq!(j.first("nordugrid-pbsjob-status"), Some("INLRMS:R"));
        assert_eq!(
            j.first("nordugrid-pbsjob-globalowner"),
            Some("/O=Grid/CN=A")
        );
        assert_eq!(j.first("nordugrid-pbsjob-exitcode"), None);
    }

    #[test]
    fn finished_job_carries_exit_code() {
        let c = one_queue_cluster();
        let job = JobInfo {
            gridid: "alpha:2-def456".to_string(),
            owner_dn: "/O=Grid/CN=A".to_string(),
            status: "FINISHED".to_string(),
            queue: "short".to_string(),
            submitted_ms: 1_000,
            exit_code: Some(7),
        };
        let entries = gris_snapshot(&c, &[job], &[]);
        let j = entries
            .iter()
            .find(|e| e.objectclass() == Some(OC_JOB))
            .unwrap();
        assert_eq!(j.first("nordugrid-pbsjob-exitcode"), Some("7"));
    }

    #[test]
    fn every_child_dn_ends_with_its_parent_dn() {
        let mut c = one_queue_cluster();
        c.queues.push(QueueState {
            name: "long".to_string(),
            max_cputime_s: 3600,
            max_memory_mb: 1024,
            max_disk_mb: 4096,
            cpus: 1,
            running: 1,
            queued: 2,
        });
        let jobs = vec![JobInfo {
            gridid: "alpha:3-aaa111".to_string(),
            owner_dn: "/O=Grid/CN=A".to_string(),
            status: "INLRMS:Q".to_string(),
            queue: "long".to_string(),
            submitted_ms: 0,
            exit_code: None,
        }];
        let entries = gris_snapshot(&c, &jobs, &c.authorized);
        let dns: BTreeSet<&str> = entries.iter().map(|e| e.dn.as_str()).collect();
        assert_eq!(dns.len(), entries.len(), "dns are unique");
        for e in &entries {
            if let Some((_, parent)) = e.dn.split_once(',') {
                if parent.starts_with("ou=") {
                    continue; // the cluster root
                }
                assert!(dns.contains(parent), "parent of {} missing", e.dn);
            }
        }
    }

    #[test]
    fn user_free_cpus_is_min_of_queue_and_cluster() {
        let mut c = one_queue_cluster();
        c.free_cpus = 1; // cluster nearly full
        let entries = gris_snapshot(&c, &[], &c.authorized);
        let u = entries
            .iter()
            .find(|e| e.objectclass() == Some(OC_AUTHUSER))
            .unwrap();
        assert_eq!(u.first("nordugrid-authuser-freecpus"), Some("1"));
    }
}

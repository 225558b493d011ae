//! The acceptance suite: one test per criterion, each printing a
//! PASS line with its number when it holds.
//!
//! Criteria (all primary):
//!  1. end-to-end task flow on the demo fleet in < 15 s
//!  2. broker equals a brute-force oracle on 500 random trials
//!  3. filter evaluation equals a brute-force oracle on 1000 pairs
//!  4. registry caching: exact upstream fetch counts under a 1 s ttl
//!  5. exhaustive state × event transition legality
//!  6. cancellation from every pre-terminal state within 2 s logical
//!  7. payload bytes only ever flow client↔cluster↔storage
//!  8. manager crash+restart in every non-terminal state, one execution
//!  9. session retention: present at FINISHED, gone after the lifetime
//! 10. decoder fuzz over 10k mutated messages, 400 on every bad request
//! 11. twenty concurrent jobs from three subjects, consistent counts

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ngrid::broker::{feasible, match_candidates, ClusterView, QueueView};
use ngrid::clock::Clock;
use ngrid::gm::{next_state, JobEvent, JobState, JOB_EVENTS, JOB_STATES};
use ngrid::infomodel::{parse_filter, Entry, Filter};
use ngrid::wire::{
    decode, encode_request, respond_bytes, serve_tcp, Message, Purpose, Request, ServiceRole,
    Subject, Verb,
};
use ngrid::xrsl::{parse_job, JobDescription};
use ngrid_harness::{run_taskflow, Fleet, TaskflowSpec};

fn jane() -> Subject {
    Subject::new("/O=Grid/CN=Jane Doe").unwrap()
}

fn pass(n: u32, what: &str) {
    println!("ACCEPTANCE {n} PASS: {what}");
}

// =====================================================================
// 1. End-to-end task flow
// =====================================================================

#[test]
fn criterion_01_end_to_end_task_flow() {
    let started = Instant::now();
    let fleet = Fleet::boot_demo().unwrap();
    fleet
        .preload_input("se1", "/d/data.in", "dataset1", b"hello grid\n", &jane())
        .unwrap();

    let job = parse_job(
        r#"&(executable="run.sh")
           (inputfiles=("run.sh") ("data.in" "rc:dataset1"))
           (outputfiles=("out.txt" "ngse://se2:39101/results/out.txt?lfn=result1") ("log.txt"))
           (cputime="60")"#,
    )
    .unwrap();
    let mut spec = TaskflowSpec::new(jane(), job, fleet.root.join("download"));
    spec.uploads.insert(
        "run.sh".to_string(),
        b"#!/bin/sh\ntr a-z A-Z < data.in > out.txt\necho processed > log.txt\n".to_vec(),
    );
    let t = run_taskflow(&fleet, spec).unwrap();
    assert_eq!(t.final_state, "FINISHED");

    // The job went ACCEPTED -> ... -> FINISHED on its cluster.
    let cluster = fleet
        .clusters
        .iter()
        .find(|c| {
            c.events().iter().any(
                |e| matches!(e, ngrid::gm::GmEvent::Qsub { gridid, .. } if gridid == &t.gridid),
            )
        })
        .expect("some cluster ran the job");
    let transitions: Vec<(JobState, JobState)> = cluster
        .events()
        .iter()
        .filter_map(|e| match e {
            ngrid::gm::GmEvent::Transition { gridid, from, to } if gridid == &t.gridid => {
                Some((*from, *to))
            }
            _ => None,
        })
        .collect();
    assert_eq!(transitions.first().unwrap().0, JobState::Accepted);
    assert_eq!(transitions.last().unwrap().1, JobState::Finished);

    // Retained output downloaded byte-identical.
    assert_eq!(t.downloaded.len(), 1);
    assert_eq!(std::fs::read(&t.downloaded[0]).unwrap(), b"processed\n");

    // The catalog resolves the new replica and its bytes match exactly.
    let ui = fleet.ui(&jane());
    let probe = parse_job(r#"&(executable="x")(inputfiles=("r" "rc:result1"))"#).unwrap();
    let (_, resolved) = ui
        .resolve_inputs(&probe, &fleet.rc_endpoint().unwrap())
        .unwrap();
    assert_eq!(resolved[0].chosen_pfn, "ngse://se2:39101/results/out.txt");
    assert_eq!(
        fleet.se("se2").get("/results/out.txt", &jane()).unwrap(),
        b"HELLO GRID\n"
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 15, "took {elapsed:?}");
    pass(1, &format!("echo job finished end to end in {elapsed:?}"));
}

// =====================================================================
// 2. Broker oracle equivalence
// =====================================================================

// The brute-force oracle: applies the six predicates independently to
// every (cluster, queue) pair, then sorts by the published rank key.
fn oracle_match(
    job: &JobDescription,
    clusters: &[ClusterView],
    subject: &Subject,
) -> Vec<(String, String)> {
    let user_ok = |c: &ClusterView| {
        c.authusers.iter().any(|pat| match pat.strip_suffix('*') {
            Some(prefix) => subject.dn().starts_with(prefix),
            None => subject.dn() == pat,
        })
    };
    let mut rows: Vec<(u64, u64, String, String)> = Vec::new();
    for c in clusters {
        for q in &c.queues {
            let cputime_ok = job.cputime_s <= q.max_cputime_s;
            let memory_ok = job.memory_mb <= q.max_memory_mb;
            let disk_ok = job.disk_mb <= q.max_disk_mb;
            let rte_ok = job
                .runtime_environments
                .iter()
                .all(|r| c.runtime_environments.contains(r));
            let queue_ok = job.queue.is_empty() || job.queue == q.name;
            if cputime_ok && memory_ok && disk_ok && rte_ok && queue_ok && user_ok(c) {
                rows.push((
                    c.free_cpus,
                    q.user_queue_length.unwrap_or(q.queued),
                    c.name.clone(),
                    q.name.clone(),
                ));
            }
        }
    }
    rows.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
            .then_with(|| a.3.cmp(&b.3))
    });
    rows.into_iter().map(|(_, _, c, q)| (c, q)).collect()
}

fn random_fleet(rng: &mut StdRng) -> Vec<ClusterView> {
    let all_rtes = ["OS/LINUX-2.4", "APPS/HEP-1", "APPS/BIO-2"];
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|i| {
            let name = format!("c{i:02}");
            let queues = (0..rng.random_range(1..=3usize))
                .map(|j| QueueView {
                    dn: format!("nordugrid-pbsqueue-name=q{j},nordugrid-cluster-name={name}"),
                    name: format!("q{j}"),
                    max_cputime_s: rng.random_range(0..2_000),
                    max_memory_mb: rng.random_range(0..2_048),
                    max_disk_mb: rng.random_range(0..4_096),
                    running: rng.random_range(0..4),
                    queued: rng.random_range(0..10),
                    user_free_cpus: None,
                    user_queue_length: if rng.random_bool(0.5) {
                        Some(rng.random_range(0..10))
                    } else {
                        None
                    },
                })
                .collect();
            ClusterView {
                dn: format!("nordugrid-cluster-name={name},ou=dk,o=grid"),
                name: name.clone(),
                contact: format!("ng://{name}:1"),
                total_cpus: 8,
                free_cpus: rng.random_range(0..8),
                runtime_environments: all_rtes
                    .iter()
                    .filter(|_| rng.random_bool(0.6))
                    .map(|s| s.to_string())
                    .collect(),
                local_se_paths: vec![],
                authusers: if rng.random_bool(0.8) {
                    vec!["/O=Grid/*".to_string()]
                } else {
                    vec!["/O=Grid/CN=OnlyHim".to_string()]
                },
                queues,
            }
        })
        .collect()
}

fn random_job(rng: &mut StdRng) -> JobDescription {
    let all_rtes = ["OS/LINUX-2.4", "APPS/HEP-1", "APPS/BIO-2"];
    JobDescription {
        executable: "run.sh".to_string(),
        cputime_s: rng.random_range(0..2_000),
        memory_mb: rng.random_range(0..2_048),
        disk_mb: rng.random_range(0..4_096),
        runtime_environments: all_rtes
            .iter()
            .filter(|_| rng.random_bool(0.3))
            .map(|s| s.to_string())
            .collect(),
        queue: if rng.random_bool(0.3) {
            format!("q{}", rng.random_range(0..3))
        } else {
            String::new()
        },
        ..Default::default()
    }
}

#[test]
fn criterion_02_broker_oracle_equivalence() {
    let mut rng = StdRng::seed_from_u64(0x6272_6f6b);
    let subject = jane();
    for trial in 0..500 {
        let clusters = random_fleet(&mut rng);
        let job = random_job(&mut rng);
        let got: Vec<(String, String)> = feasible(&match_candidates(&job, &clusters, &subject))
            .iter()
            .map(|c| (c.cluster.name.clone(), c.queue.name.clone()))
            .collect();
        let want = oracle_match(&job, &clusters, &subject);
        assert_eq!(got, want, "trial {trial} diverged from the oracle");
        // Soundness: no selected candidate violates any requirement.
        for c in feasible(&match_candidates(&job, &clusters, &subject)) {
            assert!(c.rejection_reasons.is_empty());
        }
    }
    pass(
        2,
        "broker matched the brute-force oracle on 500 random trials",
    );
}

// =====================================================================
// 3. Filter oracle equivalence
// =====================================================================

fn oracle_wildcard(pattern: &[char], value: &[char]) -> bool {
    match pattern.split_first() {
        None => value.is_empty(),
        Some(('*', rest)) => (0..=value.len()).any(|i| oracle_wildcard(rest, &value[i..])),
        Some((c, rest)) => value.first() == Some(c) && oracle_wildcard(rest, &value[1..]),
    }
}

fn oracle_eval(f: &Filter, e: &Entry) -> bool {
    match f {
        Filter::And(fs) => fs.iter().all(|f| oracle_eval(f, e)),
        Filter::Or(fs) => fs.iter().any(|f| oracle_eval(f, e)),
        Filter::Not(f) => !oracle_eval(f, e),
        Filter::Present(attr) => e.attrs.get(attr).is_some_and(|v| !v.is_empty()),
        Filter::Eq { attr, pattern } => e.attrs.get(attr).is_some_and(|values| {
            let p: Vec<char> = pattern.to_lowercase().chars().collect();
            values.iter().any(|v| {
                let v: Vec<char> = v.to_lowercase().chars().collect();
                oracle_wildcard(&p, &v)
            })
        }),
    }
}

fn random_filter(rng: &mut StdRng, depth: u32) -> Filter {
    let attrs = ["a", "b", "objectclass", "x-y"];
    if depth == 0 || rng.random_bool(0.4) {
        let attr = attrs[rng.random_range(0..attrs.len())].to_string();
        let pattern: String = (0..rng.random_range(0..5usize))
            .map(|_| ['a', 'b', 'A', '*'][rng.random_range(0..4)])
            .collect();
        if pattern == "*" {
            Filter::Present(attr)
        } else {
            Filter::Eq { attr, pattern }
        }
    } else {
        match rng.random_range(0..3) {
            0 => Filter::And(
                (0..rng.random_range(1..3usize))
                    .map(|_| random_filter(rng, depth - 1))
                    .collect(),
            ),
            1 => Filter::Or(
                (0..rng.random_range(1..3usize))
                    .map(|_| random_filter(rng, depth - 1))
                    .collect(),
            ),
            _ => Filter::Not(Box::new(random_filter(rng, depth - 1))),
        }
    }
}

fn random_entry(rng: &mut StdRng) -> Entry {
    let attrs = ["a", "b", "objectclass", "x-y"];
    let mut e = Entry::new("x=1,o=grid", "nordugrid-cluster");
    for attr in attrs {
        for _ in 0..rng.random_range(0..3usize) {
            let value: String = (0..rng.random_range(0..4usize))
                .map(|_| ['a', 'b', 'B'][rng.random_range(0..3)])
                .collect();
            e.add(attr, value);
        }
    }
    e
}

#[test]
fn criterion_03_filter_oracle_equivalence() {
    let mut rng = StdRng::seed_from_u64(0x6669_6c74);
    for trial in 0..1_000 {
        let filter = random_filter(&mut rng, 3);
        let entry = random_entry(&mut rng);
        // Round-trip through the textual form first, as servers do.
        let reparsed = parse_filter(&filter.to_text()).unwrap();
        assert_eq!(
            reparsed.eval(&entry),
            oracle_eval(&filter, &entry),
            "trial {trial}: filter {} disagreed",
            filter.to_text()
        );
    }
    pass(
        3,
        "filter evaluation matched the brute-force oracle on 1000 pairs",
    );
}

// =====================================================================
// 4. Registry caching
// =====================================================================

#[test]
fn criterion_04_giis_caching_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[giis "g"]
port = 39300
ttl = 1

[cluster "a"]
port = 39000
parent_giis = g
queues = q:600:512:1024:1
ttl = 1

[cluster "b"]
port = 39001
parent_giis = g
queues = q:600:512:1024:1
ttl = 1
"#;
    let cfg = ngrid::config::parse_fleet(text, dir.path()).unwrap();
    let fleet = Fleet::boot(cfg, dir.path()).unwrap();
    let ui = fleet.ui(&jane());

    // 10 queries inside half a second of logical time: one fetch per child.
    for i in 0..10 {
        let d = ui.discover().unwrap();
        assert_eq!(d.clusters.len(), 2, "query {i}");
        fleet.clock.advance(50);
    }
    let giis = fleet.giis("g");
    for (child, fetches) in giis.fetch_counts() {
        assert_eq!(fetches, 1, "child {child} after 10 queries in 0.5 s");
    }
    for c in &fleet.clusters {
        assert_eq!(c.mds_query_count(), 1, "{}", c.cfg.name);
    }

    // Advancing past the ttl buys exactly one more fetch per child.
    fleet.clock.advance(1_000);
    ui.discover().unwrap();
    for (child, fetches) in giis.fetch_counts() {
        assert_eq!(fetches, 2, "child {child} after the ttl elapsed");
    }
    for c in &fleet.clusters {
        assert_eq!(c.mds_query_count(), 2, "{}", c.cfg.name);
    }
    pass(4, "exactly one upstream fetch per child per ttl window");
}

// =====================================================================
// 5. State machine exhaustiveness
// =====================================================================

#[test]
fn criterion_05_state_machine_exhaustive() {
    use JobEvent::*;
    use JobState::*;
    let legal: BTreeSet<(JobState, JobEvent, JobState)> = [
        (Accepted, Advance, Preparing),
        (Preparing, StagingDone, InlrmsQ),
        (Preparing, Failure, Failed),
        (InlrmsQ, LrmsRunning, InlrmsR),
        (InlrmsQ, Failure, Failed),
        (InlrmsR, LrmsExited, Finishing),
        (InlrmsR, Failure, Failed),
        (Finishing, StageOutDone, Finished),
        (Finishing, Failure, Failed),
        (Accepted, Cancel, Canceling),
        (Preparing, Cancel, Canceling),
        (InlrmsQ, Cancel, Canceling),
        (InlrmsR, Cancel, Canceling),
        (Finishing, Cancel, Canceling),
        (Canceling, Advance, Failed),
        (Finished, LifetimeExpired, Deleted),
        (Failed, LifetimeExpired, Deleted),
    ]
    .into_iter()
    .collect();

    let mut pairs = 0;
    for state in JOB_STATES {
        for event in JOB_EVENTS {
            pairs += 1;
            let expected = legal
                .iter()
                .find(|(s, e, _)| *s == state && *e == event)
                .map(|(_, _, to)| *to);
            assert_eq!(
                next_state(state, event),
                expected,
                "{state} × {event:?} must {}",
                expected.map_or("be ignored".to_string(), |s| format!("go to {s}"))
            );
        }
    }
    assert_eq!(pairs, JOB_STATES.len() * JOB_EVENTS.len());

    // Live spot check: an illegal request leaves the state untouched.
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let job = parse_job(r#"&(executable="/bin/true")"#).unwrap();
    let d = ui.discover().unwrap();
    let cands = match_candidates(&job, &d.clusters, &jane());
    let target = feasible(&cands)[0];
    let gridid = ui.submit(&job, target, &BTreeMap::new()).unwrap();
    let cluster = fleet.cluster(&target.cluster.name);
    fleet
        .pump_until(
            || cluster.job_state(&gridid) == Some(JobState::Finished),
            1_000,
            20,
        )
        .unwrap();
    let err = ui
        .control(
            &gridid,
            &target.cluster.contact,
            ngrid::xrsl::Action::Cancel,
        )
        .unwrap_err();
    assert!(err.to_string().contains("409"), "{err}");
    assert_eq!(cluster.job_state(&gridid), Some(JobState::Finished));
    pass(
        5,
        &format!("{pairs} state × event pairs verified against the legal set"),
    );
}

// =====================================================================
// 6. Cancellation matrix
// =====================================================================

#[test]
fn criterion_06_cancellation_matrix() {
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let cluster = fleet.cluster("beta"); // one CPU: easy to park jobs
    let contact = cluster.cfg.contact.clone();

    let submit_direct = |xrsl: &str| -> String {
        let client = &ui.client;
        let req = client
            .request(Verb::Submit, "/jobs")
            .with_body(xrsl.as_bytes().to_vec());
        let resp = client.call(&contact, req).unwrap();
        assert_eq!(resp.code, 200, "{}", resp.reason);
        resp.headers.get("GridId").unwrap().to_string()
    };
    let cancel = |gridid: &str| {
        ui.control(gridid, &contact, ngrid::xrsl::Action::Cancel)
            .unwrap();
    };
    // Cancellation must land within 2 s of logical time: 100 pumps at
    // 20 ms per pump.
    let settle = |gridid: &str| {
        let t0 = fleet.clock.now_ms();
        fleet
            .pump_until(
                || cluster.job_state(gridid) == Some(JobState::Failed),
                100,
                20,
            )
            .unwrap();
        let took = fleet.clock.now_ms() - t0;
        assert!(took <= 2_000, "cancel took {took} ms of logical time");
        let rec = cluster.job_record(gridid).unwrap();
        assert_eq!(rec.failure_reason, "cancelled");
    };

    // ACCEPTED: cancel before the executor ever runs.
    let a = submit_direct(r#"&(executable="/bin/true")"#);
    assert_eq!(cluster.job_state(&a), Some(JobState::Accepted));
    cancel(&a);
    settle(&a);

    // PREPARING: parked waiting for an upload that never comes.
    let b = submit_direct(r#"&(executable="run.sh")(inputfiles=("run.sh"))"#);
    fleet
        .pump_until(
            || cluster.job_state(&b) == Some(JobState::Preparing),
            100,
            20,
        )
        .unwrap();
    cancel(&b);
    settle(&b);

    // INLRMS:R first (the blocker), then INLRMS:Q behind it.
    let runner =
        submit_direct(r#"&(executable="/bin/sh")(arguments=("-c" "sleep 30"))(cputime="120")"#);
    fleet
        .pump_until(
            || cluster.job_state(&runner) == Some(JobState::InlrmsR),
            200,
            20,
        )
        .unwrap();
    let queued = submit_direct(r#"&(executable="/bin/true")"#);
    fleet
        .pump_until(
            || cluster.job_state(&queued) == Some(JobState::InlrmsQ),
            200,
            20,
        )
        .unwrap();
    cancel(&queued);
    settle(&queued);

    // INLRMS:R: the running process must be provably dead afterwards.
    let local_id = cluster.job_record(&runner).unwrap().local_id.unwrap();
    let pid = cluster.lrms.qstat_one(local_id).unwrap().pid.unwrap();
    assert_eq!(
        unsafe { libc::kill(pid as i32, 0) },
        0,
        "runner alive before cancel"
    );
    cancel(&runner);
    settle(&runner);
    assert_ne!(
        unsafe { libc::kill(pid as i32, 0) },
        0,
        "pid {pid} survived the cancel"
    );

    pass(
        6,
        "cancel from ACCEPTED/PREPARING/INLRMS:Q/INLRMS:R all failed as 'cancelled' in time",
    );
}

// =====================================================================
// 7. Peer-to-peer transfer ledger
// =====================================================================

#[test]
fn criterion_07_peer_to_peer_ledger() {
    let fleet = Fleet::boot_demo().unwrap();
    fleet
        .preload_input(
            "se1",
            "/d/data.in",
            "dataset1",
            &vec![7u8; 64 * 1024],
            &jane(),
        )
        .unwrap();
    let job = parse_job(
        r#"&(executable="run.sh")
           (inputfiles=("run.sh") ("data.in" "rc:dataset1"))
           (outputfiles=("out.txt" "ngse://se2:39101/results/out.txt?lfn=result1") ("log.txt"))"#,
    )
    .unwrap();
    let mut spec = TaskflowSpec::new(jane(), job, fleet.root.join("download"));
    spec.uploads.insert(
        "run.sh".to_string(),
        b"#!/bin/sh\ncp data.in out.txt\necho done > log.txt\n".to_vec(),
    );
    let t = run_taskflow(&fleet, spec).unwrap();
    assert_eq!(t.final_state, "FINISHED");

    use ServiceRole::*;
    let allowed: BTreeSet<(ServiceRole, ServiceRole)> = [
        (Ui, Cluster),
        (Cluster, Ui),
        (Ui, Se),
        (Se, Ui),
        (Cluster, Se),
        (Se, Cluster),
    ]
    .into_iter()
    .collect();
    let ledger = fleet.ledger.snapshot();
    let mut payload_edges: BTreeSet<(ServiceRole, ServiceRole)> = BTreeSet::new();
    for rec in &ledger {
        if rec.purpose == Purpose::Payload {
            assert!(
                allowed.contains(&(rec.from, rec.to)),
                "payload bytes on a forbidden edge: {:?} -> {:?}",
                rec.from,
                rec.to
            );
            assert!(rec.from != Rc && rec.to != Rc);
            assert!(rec.from != Giis && rec.to != Giis);
            payload_edges.insert((rec.from, rec.to));
        }
    }
    // The run moved real payloads on each leg of the triangle.
    assert!(payload_edges.contains(&(Ui, Cluster)), "upload leg missing");
    assert!(
        payload_edges.contains(&(Se, Cluster)),
        "stage-in leg missing"
    );
    assert!(
        payload_edges.contains(&(Cluster, Se)),
        "stage-out leg missing"
    );
    assert!(
        payload_edges.contains(&(Cluster, Ui)),
        "download leg missing"
    );
    pass(7, "payload bytes only on client/cluster/storage edges");
}

// =====================================================================
// 8. Crash recovery in every non-terminal state
// =====================================================================

#[test]
fn criterion_08_crash_recovery_every_state() {
    for state in [
        JobState::Accepted,
        JobState::Preparing,
        JobState::InlrmsQ,
        JobState::InlrmsR,
        JobState::Finishing,
        JobState::Canceling,
    ] {
        crash_recover_at(state);
    }
    pass(
        8,
        "crash+restart in all six non-terminal states, single execution each",
    );
}

fn crash_recover_at(park: JobState) {
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let cluster = fleet.cluster("beta").clone();
    let contact = cluster.cfg.contact.clone();
    let submit_direct = |xrsl: &str| -> String {
        let req = ui
            .client
            .request(Verb::Submit, "/jobs")
            .with_body(xrsl.as_bytes().to_vec());
        let resp = ui.client.call(&contact, req).unwrap();
        assert_eq!(resp.code, 200, "{}", resp.reason);
        resp.headers.get("GridId").unwrap().to_string()
    };

    // Choose a job that can be caught in the desired state.
    let gridid = match park {
        JobState::Accepted => submit_direct(
            r#"&(executable="/bin/sh")(arguments=("-c" "echo x > out.txt"))(outputfiles=("out.txt"))"#,
        ),
        JobState::Preparing => submit_direct(
            r#"&(executable="run.sh")(inputfiles=("run.sh"))(outputfiles=("out.txt"))"#,
        ),
        JobState::InlrmsQ | JobState::InlrmsR | JobState::Finishing | JobState::Canceling => {
            submit_direct(
                r#"&(executable="/bin/sh")(arguments=("-c" "sleep 0.25; echo x > out.txt"))(outputfiles=("out.txt"))(cputime="120")"#,
            )
        }
        other => panic!("not a parking state: {other}"),
    };

    match park {
        JobState::Accepted => {}
        JobState::Preparing | JobState::InlrmsQ | JobState::InlrmsR | JobState::Finishing => {
            fleet
                .pump_until(|| cluster.job_state(&gridid) == Some(park), 2_000, 10)
                .unwrap_or_else(|e| panic!("parking at {park}: {e}"));
        }
        JobState::Canceling => {
            fleet
                .pump_until(
                    || cluster.job_state(&gridid) == Some(JobState::InlrmsR),
                    2_000,
                    10,
                )
                .unwrap();
            ui.control(&gridid, &contact, ngrid::xrsl::Action::Cancel)
                .unwrap();
            assert_eq!(cluster.job_state(&gridid), Some(JobState::Canceling));
        }
        _ => unreachable!(),
    }
    assert_eq!(cluster.job_state(&gridid), Some(park), "parked at {park}");

    cluster.simulate_crash();
    assert_eq!(cluster.job_state(&gridid), None);
    cluster.recover().unwrap();
    assert_eq!(
        cluster.job_state(&gridid),
        Some(park),
        "recovered into {park}"
    );

    // For the upload-parked job, supply the missing input after recovery.
    if park == JobState::Preparing {
        let req = ui
            .client
            .request(Verb::Put, format!("/sessions/{gridid}/run.sh"))
            .with_body(b"#!/bin/sh\necho x > out.txt\n".to_vec());
        assert_eq!(ui.client.call(&contact, req).unwrap().code, 200);
    }

    let expect = if park == JobState::Canceling {
        JobState::Failed
    } else {
        JobState::Finished
    };
    fleet
        .pump_until(|| cluster.job_state(&gridid) == Some(expect), 2_000, 10)
        .unwrap_or_else(|e| panic!("{park}: job never reached {expect}: {e}"));

    // Exactly one submission reached the scheduler across the crash.
    let session = cluster.job_record(&gridid).unwrap().session_dir;
    let executions = cluster
        .lrms
        .qstat()
        .into_iter()
        .filter(|j| j.workdir == session && j.started_ms.is_some())
        .count();
    assert_eq!(executions, 1, "{park}: duplicate or lost execution");
    let submissions = cluster
        .lrms
        .qstat()
        .into_iter()
        .filter(|j| j.workdir == session)
        .count();
    assert_eq!(submissions, 1, "{park}: duplicate qsub");
}

// =====================================================================
// 9. Lifetime cleanup
// =====================================================================

#[test]
fn criterion_09_lifetime_cleanup() {
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let job = parse_job(
        r#"&(executable="/bin/sh")(arguments=("-c" "echo keep > out.txt"))(outputfiles=("out.txt"))(lifetime="2")"#,
    )
    .unwrap();
    let d = ui.discover().unwrap();
    let cands = match_candidates(&job, &d.clusters, &jane());
    let target = feasible(&cands)[0];
    let gridid = ui.submit(&job, target, &BTreeMap::new()).unwrap();
    let cluster = fleet.cluster(&target.cluster.name);

    fleet
        .pump_until(
            || cluster.job_state(&gridid) == Some(JobState::Finished),
            2_000,
            10,
        )
        .unwrap();
    let session = cluster.job_record(&gridid).unwrap().session_dir;
    assert!(session.is_dir(), "session present at FINISHED");

    // Let the registry caches see the finished job, then expire it.
    fleet.clock.advance(2_100);
    fleet.pump();
    assert_eq!(cluster.job_state(&gridid), None, "record deleted");
    assert!(!session.exists(), "session directory removed");

    // Past the registry ttl the job is gone from the information system.
    fleet.clock.advance(2_100);
    assert_eq!(ui.status(&gridid).unwrap(), "UNKNOWN");
    pass(
        9,
        "session retained at FINISHED, deleted and UNKNOWN after the lifetime",
    );
}

// =====================================================================
// 10. Protocol robustness
// =====================================================================

fn random_valid_message(rng: &mut StdRng) -> Vec<u8> {
    let verbs = [
        Verb::Query,
        Verb::Submit,
        Verb::Put,
        Verb::Get,
        Verb::Lookup,
        Verb::Attach,
    ];
    let verb = verbs[rng.random_range(0..verbs.len())];
    let subject = Subject::new("/O=Grid/CN=fuzz").unwrap();
    let mut req = Request::new(verb, format!("/t{}", rng.random_range(0..100)), &subject);
    if rng.random_bool(0.5) {
        req.headers.set("Filter", "(objectclass=*)");
    }
    if rng.random_bool(0.5) {
        let body: Vec<u8> = (0..rng.random_range(0..64u8)).collect();
        req = req.with_body(body);
    }
    encode_request(&req).unwrap()
}

fn mutate(rng: &mut StdRng, mut bytes: Vec<u8>) -> Vec<u8> {
    for _ in 0..rng.random_range(1..4) {
        if bytes.is_empty() {
            bytes = vec![rng.random(); rng.random_range(1..32)];
            continue;
        }
        match rng.random_range(0..5) {
            0 => {
                let i = rng.random_range(0..bytes.len());
                bytes[i] = rng.random();
            }
            1 => {
                let cut = rng.random_range(0..bytes.len());
                bytes.truncate(cut);
            }
            2 => {
                let i = rng.random_range(0..=bytes.len());
                let extra: Vec<u8> = (0..rng.random_range(1..16u8))
                    .map(|_| rng.random())
                    .collect();
                bytes.splice(i..i, extra);
            }
            3 => {
                let i = rng.random_range(0..bytes.len());
                let j = rng.random_range(i..bytes.len());
                bytes.drain(i..j);
            }
            _ => {
                let dup = bytes.clone();
                bytes.extend_from_slice(&dup[..rng.random_range(0..dup.len().min(32))]);
            }
        }
    }
    bytes
}

#[test]
fn criterion_10_protocol_robustness() {
    let fleet = Fleet::boot_demo().unwrap();
    let cluster = fleet.cluster("alpha").clone();

    let mut rng = StdRng::seed_from_u64(0x6675_7a7a);
    let mut crashes = 0u32;
    let mut malformed = 0u32;
    for _ in 0..10_000 {
        let seed = random_valid_message(&mut rng);
        let input = mutate(&mut rng, seed);
        let outcome = std::panic::catch_unwind(|| decode(&input));
        let decoded = match outcome {
            Ok(result) => result,
            Err(_) => {
                crashes += 1;
                continue;
            }
        };
        // Every failure carries a usable description (position or cause).
        if let Err(e) = &decoded {
            malformed += 1;
            assert!(!e.to_string().is_empty());
        }
        // The server answers every byte string; malformed input gets 400.
        let reply = respond_bytes(cluster.as_ref(), &input);
        let (msg, _) = decode(&reply).expect("server reply always decodes");
        match (decoded, msg) {
            (Err(_), Message::Response(resp)) => assert_eq!(resp.code, 400),
            (Ok(_), Message::Response(_)) => {}
            (_, Message::Request(_)) => panic!("server answered with a request"),
        }
    }
    assert_eq!(crashes, 0, "decoder panicked");
    assert!(malformed > 1_000, "mutations were too gentle: {malformed}");

    // The same contract over real sockets.
    let handle = serve_tcp("127.0.0.1:0", cluster.clone()).unwrap();
    for _ in 0..200 {
        let seed = random_valid_message(&mut rng);
        let input = mutate(&mut rng, seed);
        let was_bad = decode(&input).is_err();
        use std::io::{Read, Write};
        let mut stream = std::net::TcpStream::connect(handle.addr).unwrap();
        stream.write_all(&input).unwrap();
        stream.shutdown(std::net::Shutdown::Write).unwrap();
        let mut reply = Vec::new();
        stream.read_to_end(&mut reply).unwrap();
        assert!(!reply.is_empty(), "server dropped the connection silently");
        let (msg, _) = decode(&reply).expect("tcp reply decodes");
        if let (true, Message::Response(resp)) = (was_bad, msg) {
            assert_eq!(resp.code, 400);
        }
    }
    handle.shutdown();
    pass(
        10,
        &format!("10000 mutated messages, {malformed} malformed, 0 crashes, all answered"),
    );
}

// =====================================================================
// 11. Concurrency smoke
// =====================================================================

#[test]
fn criterion_11_concurrency_smoke() {
    let fleet = Arc::new(Fleet::boot_demo().unwrap());
    let stop = Arc::new(AtomicBool::new(false));

    // Executor thread: pump the fleet on a steadily advancing clock.
    let pump_fleet = fleet.clone();
    let pump_stop = stop.clone();
    let pumper = std::thread::spawn(move || {
        while !pump_stop.load(Ordering::SeqCst) {
            pump_fleet.pump();
            pump_fleet.clock.advance(10);
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
    });

    let subjects = [
        Subject::new("/O=Grid/CN=Ann").unwrap(),
        Subject::new("/O=Grid/CN=Ben").unwrap(),
        Subject::new("/O=Grid/CN=Cam").unwrap(),
    ];
    let counts = [7usize, 7, 6];
    let mut submitters = Vec::new();
    for (subject, n) in subjects.iter().zip(counts) {
        let fleet = fleet.clone();
        let subject = subject.clone();
        submitters.push(std::thread::spawn(move || {
            let ui = fleet.ui(&subject);
            let d = ui.discover().unwrap();
            let mut ids = Vec::new();
            for i in 0..n {
                let job = parse_job(&format!(
                    r#"&(executable="/bin/sh")(arguments=("-c" "sleep 0.0{i}; echo {i} > out.txt"))(outputfiles=("out.txt"))(cputime="120")"#
                ))
                .unwrap();
                let cands = match_candidates(&job, &d.clusters, &subject);
                let ranked = feasible(&cands);
                // Spread the load: not everyone picks the top candidate.
                let target = ranked[i % ranked.len().min(3)];
                let gridid = ui.submit(&job, target, &BTreeMap::new()).unwrap();
                ids.push((target.cluster.name.clone(), gridid));
            }
            ids
        }));
    }
    let mut jobs: Vec<(String, String)> = Vec::new();
    for s in submitters {
        jobs.extend(s.join().unwrap());
    }
    assert_eq!(jobs.len(), 20);

    // Sample consistency while everything runs: provider-visible job
    // counts must equal the manager's records at every instant.
    let deadline = Instant::now() + std::time::Duration::from_secs(60);
    loop {
        for c in fleet.clusters.iter() {
            let (visible, records) = c.consistency_sample();
            assert_eq!(visible, records, "cluster {}", c.cfg.name);
        }
        let outstanding = jobs
            .iter()
            .filter(|(cluster, gridid)| {
                !matches!(
                    fleet.cluster(cluster).job_state(gridid),
                    Some(JobState::Finished) | Some(JobState::Failed)
                )
            })
            .count();
        if outstanding == 0 {
            break;
        }
        assert!(
            Instant::now() < deadline,
            "{outstanding} jobs never settled"
        );
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    stop.store(true, Ordering::SeqCst);
    pumper.join().unwrap();

    let mut finished = 0;
    for (cluster, gridid) in &jobs {
        let rec = fleet.cluster(cluster).job_record(gridid).unwrap();
        match rec.state {
            JobState::Finished => {
                finished += 1;
                assert!(rec.session_dir.join("out.txt").is_file());
            }
            JobState::Failed => {
                assert!(
                    !rec.failure_reason.is_empty(),
                    "{gridid} failed without a reason"
                );
            }
            other => panic!("{gridid} ended in {other}"),
        }
    }
    assert!(finished >= 15, "only {finished}/20 finished");
    pass(
        11,
        &format!("{finished}/20 concurrent jobs finished, counts consistent throughout"),
    );
}

//! Whole-fleet task-flow runs: the golden transcript, cancellation and
//! fault injection, and manager restarts mid-flow.

use std::collections::BTreeMap;

use ngrid_harness::{run_taskflow, Fleet, TaskflowSpec};

use ngrid::gm::JobState;
use ngrid::wire::Subject;
use ngrid::xrsl::parse_job;

fn jane() -> Subject {
    Subject::new("/O=Grid/CN=Jane Doe").unwrap()
}

const RUN_SH: &str = "#!/bin/sh\ntr a-z A-Z < data.in > out.txt\necho processed > log.txt\n";

fn echo_spec(fleet: &Fleet) -> TaskflowSpec {
    let job = parse_job(
        r#"&(executable="run.sh")
           (inputfiles=("run.sh") ("data.in" "rc:dataset1"))
           (outputfiles=("out.txt" "ngse://se2:39101/results/out.txt?lfn=result1") ("log.txt"))
           (cputime="60")"#,
    )
    .unwrap();
    let mut spec = TaskflowSpec::new(jane(), job, fleet.root.join("download"));
    spec.uploads
        .insert("run.sh".to_string(), RUN_SH.as_bytes().to_vec());
    spec
}

#[test]
fn golden_transcript_for_the_echo_job() {
    let fleet = Fleet::boot_demo().unwrap();
    fleet
        .preload_input("se1", "/d/data.in", "dataset1", b"hello grid\n", &jane())
        .unwrap();

    let t = run_taskflow(&fleet, echo_spec(&fleet)).unwrap();
    assert_eq!(t.final_state, "FINISHED");

    // Status polling is timing-dependent; everything else is fixed.
    let shape: Vec<String> = t.labels().into_iter().filter(|l| l != "status").collect();
    assert_eq!(
        shape,
        vec![
            "giis-query",
            "rc-lookup",
            "broker-select",
            "submit",
            "stage-in",
            "upload",
            "qsub",
            "run",
            "stage-out",
            "rc-register",
            "download",
            "giis-refresh",
            "final",
        ]
    );

    // The downloaded retained output is intact.
    assert_eq!(t.downloaded.len(), 1);
    assert_eq!(
        std::fs::read_to_string(&t.downloaded[0]).unwrap(),
        "processed\n"
    );

    // The registered replica resolves and carries the transformed input.
    let ui = fleet.ui(&jane());
    let (job, resolved) = ui
        .resolve_inputs(
            &parse_job(r#"&(executable="x")(inputfiles=("out.txt" "rc:result1"))"#).unwrap(),
            &fleet.rc_endpoint().unwrap(),
        )
        .unwrap();
    assert_eq!(resolved[0].chosen_pfn, "ngse://se2:39101/results/out.txt");
    let bytes = fleet.se("se2").get("/results/out.txt", &jane()).unwrap();
    assert_eq!(bytes, b"HELLO GRID\n");
    drop(job);

    // Observed statuses were real states, in life-cycle order.
    let states: Vec<&str> = t
        .events
        .iter()
        .filter(|e| e.label == "status")
        .map(|e| e.detail.as_str())
        .collect();
    let order = [
        "ACCEPTED",
        "PREPARING",
        "INLRMS:Q",
        "INLRMS:R",
        "FINISHING",
        "FINISHED",
    ];
    let mut last = 0;
    for s in states {
        let idx = order
            .iter()
            .position(|o| o == &s)
            .unwrap_or_else(|| panic!("unexpected status {s}"));
        assert!(idx >= last, "status went backwards: {s}");
        last = idx;
    }
}

#[test]
fn cancel_during_run_fails_the_job() {
    let fleet = Fleet::boot_demo().unwrap();
    let job = parse_job(r#"&(executable="/bin/sh")(arguments=("-c" "sleep 30"))(cputime="120")"#)
        .unwrap();
    let mut spec = TaskflowSpec::new(jane(), job, fleet.root.join("download"));
    spec.cancel_at = Some(JobState::InlrmsR);
    let t = run_taskflow(&fleet, spec).unwrap();
    assert_eq!(t.final_state, "FAILED");
    assert!(t.labels().contains(&"cancel".to_string()));
    let rec = fleet
        .cluster(&fleet.job_state(&t.gridid).unwrap().0)
        .job_record(&t.gridid)
        .unwrap();
    assert_eq!(rec.failure_reason, "cancelled");
}

#[test]
fn dead_se_fails_stage_in() {
    let fleet = Fleet::boot_demo().unwrap();
    fleet
        .preload_input("se1", "/d/data.in", "dataset1", b"payload", &jane())
        .unwrap();
    fleet.set_down("se1", true);
    let t = run_taskflow(&fleet, echo_spec(&fleet)).unwrap();
    assert_eq!(t.final_state, "FAILED");
    let (cluster, _) = fleet.job_state(&t.gridid).unwrap();
    let rec = fleet.cluster(&cluster).job_record(&t.gridid).unwrap();
    assert_eq!(rec.failure_reason, "stage-in failed: data.in");
}

#[test]
fn unknown_lfn_aborts_before_submission() {
    let fleet = Fleet::boot_demo().unwrap();
    let err = run_taskflow(&fleet, echo_spec(&fleet)).unwrap_err();
    assert!(format!("{err:#}").contains("rc lookup"), "{err:#}");
    // Nothing was submitted anywhere.
    for c in &fleet.clusters {
        assert!(c.gridids().is_empty());
    }
}

#[test]
fn infeasible_job_reports_no_resource() {
    let fleet = Fleet::boot_demo().unwrap();
    let job = parse_job(r#"&(executable="/bin/true")(memory="999999")"#).unwrap();
    let spec = TaskflowSpec::new(jane(), job, fleet.root.join("download"));
    let err = run_taskflow(&fleet, spec).unwrap_err();
    assert!(
        format!("{err:#}").contains("no feasible resource"),
        "{err:#}"
    );
}

#[test]
fn failed_upload_cancels_the_submission() {
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let discovery = ui.discover().unwrap();
    let job = parse_job(r#"&(executable="run.sh")(inputfiles=("run.sh"))"#).unwrap();
    let candidates = ngrid::broker::match_candidates(&job, &discovery.clusters, &jane());
    let target = ngrid::broker::feasible(&candidates)[0].clone();
    // No content supplied for run.sh: the upload step cannot proceed and
    // the client cancels its own submission.
    let err = ui.submit(&job, &target, &BTreeMap::new()).unwrap_err();
    assert!(err.to_string().contains("run.sh"), "{err}");
    let cluster = fleet.cluster(&target.cluster.name);
    let gridids = cluster.gridids();
    assert_eq!(gridids.len(), 1);
    fleet
        .pump_until(
            || cluster.job_state(&gridids[0]) == Some(JobState::Failed),
            500,
            20,
        )
        .unwrap();
    assert_eq!(
        cluster.job_record(&gridids[0]).unwrap().failure_reason,
        "cancelled"
    );
}

#[test]
fn manager_restart_mid_run_reaches_the_same_final_state() {
    let fleet = Fleet::boot_demo().unwrap();
    let ui = fleet.ui(&jane());
    let discovery = ui.discover().unwrap();
    let job = parse_job(
        r#"&(executable="/bin/sh")(arguments=("-c" "sleep 0.3; echo ok > out.txt"))(outputfiles=("out.txt"))(cputime="120")"#,
    )
    .unwrap();
    let candidates = ngrid::broker::match_candidates(&job, &discovery.clusters, &jane());
    let target = ngrid::broker::feasible(&candidates)[0].clone();
    let gridid = ui.submit(&job, &target, &BTreeMap::new()).unwrap();
    let cluster = fleet.cluster(&target.cluster.name).clone();

    fleet
        .pump_until(
            || cluster.job_state(&gridid) == Some(JobState::InlrmsR),
            1_000,
            20,
        )
        .unwrap();
    cluster.simulate_crash();
    cluster.recover().unwrap();
    fleet
        .pump_until(
            || cluster.job_state(&gridid) == Some(JobState::Finished),
            1_000,
            20,
        )
        .unwrap();
    let session = cluster.job_record(&gridid).unwrap().session_dir;
    let runs = cluster
        .lrms
        .qstat()
        .into_iter()
        .filter(|j| j.workdir == session)
        .count();
    assert_eq!(runs, 1, "no duplicate submission across the restart");
}

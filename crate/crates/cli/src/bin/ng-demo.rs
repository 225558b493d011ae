use std::path::PathBuf;

use clap::Parser;

use ngrid::wire::Subject;
use ngrid::xrsl::parse_job;
use ngrid_harness::{run_taskflow, Fleet, TaskflowSpec};

/// Boots a whole fleet in one process over the in-process transport and
/// runs the complete job task flow once, printing the transcript.
#[derive(Parser)]
#[command(name = "ng-demo")]
struct Args {
    /// Fleet configuration (default: the built-in demo fleet).
    config: Option<PathBuf>,
}

fn run(args: &Args) -> anyhow::Result<String> {
    let workdir = tempfile::tempdir()?;
    let fleet = match &args.config {
        Some(path) => {
            let cfg =
                ngrid_cli::load_fleet(path).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
            Fleet::boot(cfg, workdir.path())?
        }
        None => Fleet::boot_demo()?,
    };
    let user = Subject::new("/O=Grid/CN=Demo User")?;
    fleet.preload_input("se1", "/d/data.in", "dataset1", b"hello grid\n", &user)?;

    let job = parse_job(
        r#"&(executable="run.sh")
           (inputfiles=("run.sh") ("data.in" "rc:dataset1"))
           (outputfiles=("out.txt" "ngse://se2:39101/results/out.txt?lfn=result1") ("log.txt"))
           (cputime="60")(jobname="demo")"#,
    )?;
    let mut spec = TaskflowSpec::new(user, job, fleet.root.join("download"));
    spec.uploads.insert(
        "run.sh".to_string(),
        b"#!/bin/sh\ntr a-z A-Z < data.in > out.txt\necho processed > log.txt\n".to_vec(),
    );
    let t = run_taskflow(&fleet, spec)?;
    Ok(format!("{t}"))
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(out) => {
            print!("{out}");
            if !out.contains("final FINISHED") {
                std::process::exit(2);
            }
        }
        Err(e) => {
            eprintln!("ng-demo: {e:#}");
            std::process::exit(2);
        }
    }
}

use std::path::PathBuf;

use clap::Parser;

/// Launches a cluster front-end: gatekeeper, grid manager, local scheduler and information provider in one process.
#[derive(Parser)]
#[command(name = "ng-cluster")]
struct Args {
    /// Fleet configuration file.
    config: PathBuf,
    /// Section to launch when the config defines several.
    #[arg(long)]
    name: Option<String>,
}

fn main() {
    let args = Args::parse();
    let fleet = match ngrid_cli::load_fleet(&args.config) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("ng-cluster: {}", e.message());
            std::process::exit(e.exit_code());
        }
    };
    let stop = ngrid_cli::stop_flag();
    if let Err(e) = ngrid_cli::run_cluster(&fleet, args.name.as_deref(), stop) {
        eprintln!("ng-cluster: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

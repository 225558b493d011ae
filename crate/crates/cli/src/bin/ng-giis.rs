use std::path::PathBuf;

use clap::Parser;

/// Launches an aggregating information registry.
#[derive(Parser)]
#[command(name = "ng-giis")]
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
            eprintln!("ng-giis: {}", e.message());
            std::process::exit(e.exit_code());
        }
    };
    let stop = ngrid_cli::stop_flag();
    if let Err(e) = ngrid_cli::run_giis(&fleet, args.name.as_deref(), stop) {
        eprintln!("ng-giis: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

use std::path::PathBuf;

use clap::Parser;

/// Downloads a finished job's retained output files.
#[derive(Parser)]
#[command(name = "ngget")]
struct Args {
    gridid: String,
    /// Destination directory.
    dir: PathBuf,
    #[arg(long)]
    giis: Option<String>,
}

fn main() {
    let args = Args::parse();
    let result = ngrid_cli::ui_from_env(args.giis.as_deref())
        .and_then(|ui| ngrid_cli::ngget(&ui, &args.gridid, &args.dir));
    match result {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("ngget: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

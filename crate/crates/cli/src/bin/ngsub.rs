use std::path::PathBuf;

use clap::Parser;

/// Submits an xRSL job description to the best matching resource and
/// prints the assigned grid job id.
#[derive(Parser)]
#[command(name = "ngsub")]
struct Args {
    /// Job description file.
    xrsl_file: PathBuf,
    /// Registry to query (default: the NG_GIIS environment variable).
    #[arg(long)]
    giis: Option<String>,
    /// Print the ranked candidate table and submit nothing.
    #[arg(long)]
    dryrun: bool,
}

fn run(args: &Args) -> ngrid_cli::CmdResult {
    let text = std::fs::read_to_string(&args.xrsl_file).map_err(|e| {
        ngrid_cli::CmdError::User(format!("cannot read {}: {e}", args.xrsl_file.display()))
    })?;
    let ui = ngrid_cli::ui_from_env(args.giis.as_deref())?;
    let base = args
        .xrsl_file
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let local = if args.dryrun {
        Default::default()
    } else {
        ngrid_cli::collect_local_inputs(&text, &base)?
    };
    ngrid_cli::ngsub(&ui, &text, &local, args.dryrun)
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("ngsub: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

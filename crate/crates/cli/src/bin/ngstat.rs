use clap::Parser;

/// Prints `<gridid> <state>` for one job or for all of the caller's
/// jobs, as reported by the information system.
#[derive(Parser)]
#[command(name = "ngstat")]
struct Args {
    /// Grid job id (omit with --all).
    gridid: Option<String>,
    /// Show every job owned by NG_SUBJECT.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    giis: Option<String>,
}

fn run(args: &Args) -> ngrid_cli::CmdResult {
    let ui = ngrid_cli::ui_from_env(args.giis.as_deref())?;
    match (&args.gridid, args.all) {
        (Some(id), false) => ngrid_cli::ngstat(&ui, ngrid_cli::StatTarget::One(id)),
        (None, true) => ngrid_cli::ngstat(&ui, ngrid_cli::StatTarget::All),
        _ => Err(ngrid_cli::CmdError::User(
            "pass exactly one of <gridid> or --all".to_string(),
        )),
    }
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("ngstat: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

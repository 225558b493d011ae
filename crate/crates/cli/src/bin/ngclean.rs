use clap::Parser;

/// Cancels a job if needed and removes its session directory.
#[derive(Parser)]
#[command(name = "ngclean")]
struct Args {
    gridid: String,
    #[arg(long)]
    giis: Option<String>,
}

fn main() {
    let args = Args::parse();
    let result = ngrid_cli::ui_from_env(args.giis.as_deref())
        .and_then(|ui| ngrid_cli::ngclean(&ui, &args.gridid));
    match result {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("ngclean: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

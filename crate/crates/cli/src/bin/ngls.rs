use clap::Parser;

/// Lists information-system entries matching a filter.
#[derive(Parser)]
#[command(name = "ngls")]
struct Args {
    /// Search filter, e.g. "(objectclass=nordugrid-cluster)".
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    giis: Option<String>,
}

fn main() {
    let args = Args::parse();
    let result = ngrid_cli::ui_from_env(args.giis.as_deref())
        .and_then(|ui| ngrid_cli::ngls(&ui, args.filter.as_deref()));
    match result {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("ngls: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

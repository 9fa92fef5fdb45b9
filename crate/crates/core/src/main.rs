use clap::Parser;

fn main() {
    let cli = mfdcd::cli::Cli::parse();
    if let Err(e) = mfdcd::cli::run(cli) {
        eprintln!("{}: {e}", e.tag());
        std::process::exit(e.exit_code());
    }
}

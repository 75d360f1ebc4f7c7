use clap::Parser;
use ctinr::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("ctinr: {e}");
        std::process::exit(exit_code(&e));
    }
}

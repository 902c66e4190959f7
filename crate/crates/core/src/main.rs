use clap::Parser;

use svfm::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("svfm: {e}");
        std::process::exit(exit_code(&e));
    }
}

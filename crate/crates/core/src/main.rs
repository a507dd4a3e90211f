use clap::Parser;
use ncodid::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(e) = cli::run(args) {
        eprintln!("{}", cli::error_json(&e));
        std::process::exit(cli::exit_code(&e));
    }
}

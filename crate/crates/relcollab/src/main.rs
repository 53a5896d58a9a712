use clap::Parser;
use relcollab::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(e) = cli::run(args) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error[{}]: {msg}", e.code());
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;
use stdr_cli::{execute, exit_code, Cli, EXIT_OK, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    if let Err(err) = execute(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

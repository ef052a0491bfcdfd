use clap::error::ErrorKind;
use clap::Parser;

use gcd_core::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCD_LOG", "error")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            // Usage mistakes are configuration errors.
            let _ = e.print();
            std::process::exit(1);
        }
    };

    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

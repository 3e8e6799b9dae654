use clap::Parser;
use opt_marl::cli;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            // help/version requests exit 0; real parse errors are usage errors
            if e.use_stderr() {
                let _ = e.print();
                std::process::exit(cli::EXIT_USAGE);
            }
            let _ = e.print();
            std::process::exit(cli::EXIT_OK);
        }
    };
    std::process::exit(cli::run(parsed));
}

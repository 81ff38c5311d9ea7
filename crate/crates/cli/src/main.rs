use clap::Parser;
use labeldiff_cli::{error_category, exit_code_for, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output is not an error
            if e.use_stderr() {
                eprintln!("error[usage] {e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(&cli.command) {
        eprintln!("error[{}] {e}", error_category(&e));
        std::process::exit(exit_code_for(&e));
    }
}

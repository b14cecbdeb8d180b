//! `airnet` command line: dataset generation, training, reconstruction,
//! evaluation, ablations and gradient checks.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 on numeric
//! failures (non-finite losses or occupancies, failed gradient checks).

mod cli;

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = cli::exit_code(&e);
            if let Some(clap) = e.downcast_ref::<clap::Error>() {
                let _ = clap.print();
                return ExitCode::from(if clap.use_stderr() { code } else { 0 });
            }
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

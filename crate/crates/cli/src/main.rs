use std::process::ExitCode;

use lfesi_cli::{exit_code, init_threads, parse_args, run};

fn main() -> ExitCode {
    let cli = parse_args();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

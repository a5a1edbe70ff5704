use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = tactile_cli::parse(std::env::args_os()).and_then(|cli| cli.map_or(Ok(()), tactile_cli::run));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

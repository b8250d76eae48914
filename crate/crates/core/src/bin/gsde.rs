use std::process::ExitCode;

fn main() -> ExitCode {
    match gsde_core::cli::run(std::env::args_os()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

use std::io;
use std::process::ExitCode;

use env_logger::Env;

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::default().filter_or("ASSURE_LOG", "off")).init();
    let status = assure_cli::main_with_args(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(status.code() as u8)
}

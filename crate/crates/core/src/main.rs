use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("KVTIER_LOG")).init();
    let code = kvtier::cli::main_with_args(std::env::args_os());
    ExitCode::from(code as u8)
}

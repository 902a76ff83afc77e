use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRUNEKIT_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let code = prunekit::cli::run(std::env::args_os());
    ExitCode::from(code as u8)
}

use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let verbose = argv.iter().any(|a| a == "-v" || a == "--verbose");
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "debug" } else { "warn" })).init();
    match hu_cli::run_argv(argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                let _ = ce.print();
                return ExitCode::from(if ce.use_stderr() { 1 } else { 0 });
            }
            eprintln!("error: {e:#}");
            ExitCode::from(hu_cli::EXIT_ERROR)
        }
    }
}

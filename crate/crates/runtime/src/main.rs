use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = rover_runtime::cli::Cli::parse();
    match rover_runtime::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

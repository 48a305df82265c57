use clap::Parser;
use pevlm_cli::{exit, run, Cli, CliError, RunConfig};

fn main() {
    let cli = Cli::parse();
    let code = RunConfig::resolve(cli.command, cli.settings)
        .and_then(|config| run(&config))
        .unwrap_or_else(|e: CliError| {
            eprintln!("pevlm: {e}");
            e.exit_code()
        });
    std::process::exit(if code == exit::SUCCESS { exit::SUCCESS } else { code });
}

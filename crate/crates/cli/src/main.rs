use clap::Parser;
use metaper_cli::args::Cli;
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = Cli::parse();
    let filter = EnvFilter::new(cli.global.log_level.as_str());
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_current_span(false)
        .init();
    if let Err(e) = metaper_cli::run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit);
    }
}

use clap::Parser;
use kselect::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let stdout = std::io::stdout();
    if let Err(e) = cli::run(cli, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

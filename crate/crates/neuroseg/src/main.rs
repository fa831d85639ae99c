use clap::Parser;

fn main() {
    let cli = neuroseg::cli::Cli::parse();
    if let Err(e) = neuroseg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

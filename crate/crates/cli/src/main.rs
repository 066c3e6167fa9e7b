use clap::Parser;

fn main() {
    let cli = shears_cli::Cli::parse();
    if let Err(e) = shears_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;

fn main() {
    let cli = ousb_cli::Cli::parse();
    if let Err(e) = ousb_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

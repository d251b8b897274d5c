use clap::Parser;

fn main() {
    let cli = t2ipal_cli::Cli::parse();
    if let Err(e) = t2ipal_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

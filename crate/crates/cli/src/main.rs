use clap::Parser;

fn main() {
    let cli = midus_cli::Cli::parse();
    if let Err(e) = midus_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

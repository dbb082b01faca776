use clap::Parser;

fn main() {
    let cli = megphone_cli::Cli::parse();
    if let Err(e) = megphone_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

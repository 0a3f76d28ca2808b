use clap::Parser;

fn main() {
    let cli = imoco_cli::Cli::parse();
    if let Err(e) = imoco_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

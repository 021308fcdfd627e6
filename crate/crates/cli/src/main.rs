use clap::Parser;

fn main() {
    let cli = tomfn_cli::Cli::parse();
    if let Err(e) = tomfn_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}

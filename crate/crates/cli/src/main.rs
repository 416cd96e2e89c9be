use clap::Parser;

fn main() {
    let args = vista_cli::cli::Args::parse();
    if let Err(e) = vista_cli::cli::run(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

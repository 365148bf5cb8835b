use clap::Parser;

fn main() {
    let cli = ffsense::cli::Cli::parse();
    std::process::exit(ffsense::cli::run(cli));
}

use clap::Parser;

fn main() {
    let cli = hhom::cli::Cli::parse();
    std::process::exit(hhom::cli::execute(cli));
}

use clap::Parser;

fn main() {
    let cli = shadowprice::cli::Cli::parse();
    std::process::exit(shadowprice::cli::run(&cli));
}

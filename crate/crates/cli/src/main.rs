use clap::Parser;

fn main() {
    let cli = rtp_cli::Cli::parse();
    std::process::exit(rtp_cli::run(&cli));
}

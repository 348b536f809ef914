use clap::Parser;

fn main() {
    let cli = pilotwave_cli::Cli::parse();
    std::process::exit(pilotwave_cli::main_with(cli));
}

use clap::Parser;
use pdmp_impulse::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}

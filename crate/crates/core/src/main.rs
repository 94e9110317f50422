use clap::Parser;

use crystal_surface::cli::{execute, Args};

fn main() {
    let args = Args::parse();
    std::process::exit(execute(&args));
}

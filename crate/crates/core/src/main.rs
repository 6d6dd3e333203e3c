use clap::Parser;

fn main() {
    let args = green_bundle::cli::Args::parse();
    std::process::exit(green_bundle::cli::main_with_args(args));
}

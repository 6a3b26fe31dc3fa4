use std::process::exit;

fn main() {
    exit(drss_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(paric::harness::cli::run(std::env::args_os()));
}

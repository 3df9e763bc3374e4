fn main() {
    std::process::exit(las::harness::cli::run(std::env::args_os()));
}

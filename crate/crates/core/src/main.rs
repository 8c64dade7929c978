fn main() {
    std::process::exit(gbsde::cli::run(std::env::args_os()));
}

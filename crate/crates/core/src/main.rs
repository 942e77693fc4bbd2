fn main() {
    std::process::exit(niesr::cli::run(std::env::args_os()));
}

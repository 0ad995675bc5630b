fn main() {
    std::process::exit(remix_core::cli::run(std::env::args_os()));
}

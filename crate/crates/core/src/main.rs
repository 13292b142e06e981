fn main() {
    std::process::exit(doge_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(hhmm::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(rcgkit::cli::run(std::env::args_os()));
}

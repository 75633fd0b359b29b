fn main() {
    std::process::exit(calibkit::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(lidkit::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(msam::cli::run(std::env::args_os()));
}

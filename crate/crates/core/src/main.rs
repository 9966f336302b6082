fn main() {
    std::process::exit(gpmm::cli::run(std::env::args_os()));
}

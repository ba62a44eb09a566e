fn main() {
    std::process::exit(smrt::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(prbgnn::cli::run(std::env::args_os()));
}

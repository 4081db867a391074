fn main() {
    std::process::exit(ethcast::cli::run_args(std::env::args_os()));
}

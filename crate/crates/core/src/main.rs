fn main() {
    std::process::exit(multiscale::experiments::cli::run_cli(std::env::args_os()));
}

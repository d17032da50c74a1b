fn main() {
    std::process::exit(vararray::cli::run_cli(std::env::args_os()));
}

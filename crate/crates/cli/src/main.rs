fn main() {
    std::process::exit(specfair::cli::main_with_args(std::env::args_os()));
}

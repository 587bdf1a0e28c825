fn main() {
    std::process::exit(transdae::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(sparse_radon::cli::main_with_args(std::env::args_os()));
}

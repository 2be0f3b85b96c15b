fn main() {
    std::process::exit(tscnn::cli::main_with_args(std::env::args_os()));
}

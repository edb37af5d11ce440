fn main() {
    std::process::exit(drowsy_core::cli::main_with_args(std::env::args_os()));
}

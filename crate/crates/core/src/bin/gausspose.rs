fn main() {
    std::process::exit(gausspose::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(ids_confidence::cli::main_with_args(std::env::args_os()));
}

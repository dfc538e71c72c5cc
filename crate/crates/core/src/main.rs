fn main() {
    std::process::exit(whitenorm::cli::main_with_args(std::env::args_os()));
}

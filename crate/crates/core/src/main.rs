fn main() {
    std::process::exit(moelora::cli::main_with_args(std::env::args_os()));
}

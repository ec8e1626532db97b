fn main() {
    std::process::exit(diffseg::cli::main_with_args(std::env::args_os()));
}

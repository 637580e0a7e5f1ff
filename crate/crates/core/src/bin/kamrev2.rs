fn main() {
    std::process::exit(kamrev2::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(rangeseg::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(ord2seq::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(nudgesim::cli::main_with_args(std::env::args_os()));
}

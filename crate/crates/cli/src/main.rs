fn main() {
    std::process::exit(rlbfgsb_cli::main_with_args(std::env::args_os()));
}

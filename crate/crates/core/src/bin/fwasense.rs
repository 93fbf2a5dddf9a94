fn main() {
    std::process::exit(fwasense::cli::main_with_args(std::env::args_os()));
}

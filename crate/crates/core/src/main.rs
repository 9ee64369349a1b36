fn main() {
    std::process::exit(frametrans_core::cli::main_with_args(std::env::args_os()));
}

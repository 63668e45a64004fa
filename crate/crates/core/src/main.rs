fn main() {
    std::process::exit(ncood::cli::main_with_args(std::env::args_os()));
}

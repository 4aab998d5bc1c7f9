fn main() {
    std::process::exit(blindrestore::harness::cli::main_with_args(std::env::args_os()));
}

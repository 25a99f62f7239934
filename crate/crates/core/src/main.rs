fn main() {
    std::process::exit(mmvsr::harness::cli::main_with(std::env::args_os()));
}

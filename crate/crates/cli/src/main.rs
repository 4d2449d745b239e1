fn main() {
    std::process::exit(chronicle_cli::main_with(std::env::args_os()));
}

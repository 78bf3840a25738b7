fn main() {
    std::process::exit(stagecraft::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(bat_core::cli::main_with_args(std::env::args_os()));
}

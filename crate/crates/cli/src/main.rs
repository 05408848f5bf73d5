fn main() {
    std::process::exit(sdm_cli::main_with_args(std::env::args_os()));
}

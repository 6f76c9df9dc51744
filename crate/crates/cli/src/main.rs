fn main() {
    std::process::exit(kalm_cli::run(std::env::args_os()));
}

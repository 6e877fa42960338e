fn main() {
    std::process::exit(rdpm_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(fsgan_cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(semstyle::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(gradreg_cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(geomanifold_cli::run_cli(std::env::args_os()));
}

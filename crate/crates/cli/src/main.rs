fn main() {
    std::process::exit(fem_cli::app::run(std::env::args_os()));
}

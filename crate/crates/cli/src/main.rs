fn main() {
    std::process::exit(amplab_cli::run_cli(std::env::args_os()));
}

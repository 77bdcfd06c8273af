fn main() {
    std::process::exit(moefusion_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(avse_cli::run(std::env::args_os()));
}

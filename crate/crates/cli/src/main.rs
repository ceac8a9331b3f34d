fn main() {
    std::process::exit(adareg_cli::run(std::env::args_os()));
}

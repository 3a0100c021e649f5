fn main() {
    std::process::exit(crtgee_cli::run(std::env::args_os()));
}

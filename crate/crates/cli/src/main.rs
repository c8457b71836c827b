fn main() {
    std::process::exit(evfi_cli::run(std::env::args_os()));
}

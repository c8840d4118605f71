fn main() {
    std::process::exit(focus::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(milab::cli::run(std::env::args_os()));
}

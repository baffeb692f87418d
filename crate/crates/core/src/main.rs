fn main() {
    std::process::exit(layoutlab::cli::run(std::env::args_os()));
}

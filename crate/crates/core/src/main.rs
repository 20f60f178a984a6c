fn main() {
    std::process::exit(segan::cli::run(std::env::args_os()));
}

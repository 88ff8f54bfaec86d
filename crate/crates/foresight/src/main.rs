fn main() {
    std::process::exit(foresight::cli::run(std::env::args()));
}

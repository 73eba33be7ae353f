fn main() {
    std::process::exit(s2sf::cli::run_from(std::env::args_os()));
}

fn main() {
    std::process::exit(advent_cli::run());
}

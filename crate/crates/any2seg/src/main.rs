fn main() {
    std::process::exit(any2seg::cli::run());
}

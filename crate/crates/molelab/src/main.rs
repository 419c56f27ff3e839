fn main() {
    std::process::exit(molelab::cli::run_from_args());
}

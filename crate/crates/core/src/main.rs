fn main() {
    std::process::exit(menet::cli::run(std::env::args()));
}

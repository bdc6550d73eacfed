fn main() {
    std::process::exit(tetsdf::cli::run(std::env::args()));
}

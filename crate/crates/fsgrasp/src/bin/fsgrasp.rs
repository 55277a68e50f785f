fn main() {
    std::process::exit(fsgrasp::cli::dispatch(std::env::args()));
}

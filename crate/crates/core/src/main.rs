fn main() {
    std::process::exit(avo::cli::dispatch(std::env::args()));
}

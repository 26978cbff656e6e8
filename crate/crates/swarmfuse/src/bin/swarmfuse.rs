fn main() {
    std::process::exit(swarmfuse::cli::run(std::env::args()));
}

fn main() {
    std::process::exit(callpipe::cli::run(std::env::args().skip(1).collect()));
}

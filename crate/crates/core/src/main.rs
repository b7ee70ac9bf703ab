fn main() {
    std::process::exit(srtnet::cli::run(std::env::args_os()));
}

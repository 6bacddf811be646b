fn main() {
    std::process::exit(pointdiff::cli::run(std::env::args_os()));
}

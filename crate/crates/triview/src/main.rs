fn main() {
    std::process::exit(triview::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(aesignal::cli::run(std::env::args_os()));
}

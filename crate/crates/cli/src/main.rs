fn main() {
    std::process::exit(xverify_cli::run(std::env::args_os()));
}

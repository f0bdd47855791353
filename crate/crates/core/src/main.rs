fn main() {
    std::process::exit(l1cavity::cli::run(std::env::args_os()));
}

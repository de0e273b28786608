fn main() {
    std::process::exit(tdcqkd::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(sage::cli::run(std::env::args_os()));
}

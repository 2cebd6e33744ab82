fn main() {
    std::process::exit(spinsqueeze::cli::run(std::env::args_os()));
}

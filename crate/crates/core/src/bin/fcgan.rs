fn main() {
    std::process::exit(fcgan::cli::run(std::env::args_os()));
}

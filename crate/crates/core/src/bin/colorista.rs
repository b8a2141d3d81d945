fn main() {
    std::process::exit(colorista::cli::run(std::env::args_os()));
}

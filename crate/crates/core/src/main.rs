fn main() {
    std::process::exit(vlbridge::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(rod::cli::run(std::env::args_os()));
}

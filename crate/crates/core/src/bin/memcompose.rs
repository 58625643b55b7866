fn main() {
    std::process::exit(memcompose::cli::run(std::env::args_os()));
}

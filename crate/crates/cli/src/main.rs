fn main() {
    std::process::exit(glottal_cli::run(std::env::args_os()));
}

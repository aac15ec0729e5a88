fn main() {
    std::process::exit(synergyseg::cli::run(std::env::args_os()));
}

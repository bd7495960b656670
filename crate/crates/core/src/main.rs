fn main() {
    std::process::exit(negattn::cli::main_with_args(std::env::args().collect()));
}

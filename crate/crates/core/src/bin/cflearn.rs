fn main() {
    std::process::exit(cflearn::cli::main());
}

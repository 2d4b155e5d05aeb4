fn main() {
    std::process::exit(docvault::cli::main());
}

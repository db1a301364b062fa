fn main() {
    std::process::exit(spoofbench::cli::main());
}

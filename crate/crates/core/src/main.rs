fn main() {
    std::process::exit(anchor_quality::cli::main());
}

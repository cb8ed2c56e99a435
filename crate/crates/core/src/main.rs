fn main() {
    std::process::exit(fetsim::cli::main());
}

fn main() {
    std::process::exit(handbench::cli::run());
}

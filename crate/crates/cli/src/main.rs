fn main() {
    std::process::exit(mucs_cli::run());
}

fn main() {
    std::process::exit(adr_signal::cli::run());
}

fn main() {
    std::process::exit(tham::cli::run());
}

fn main() {
    std::process::exit(belldiag::cli::run());
}

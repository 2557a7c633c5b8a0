fn main() {
    std::process::exit(splineformer::cli::run());
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(mattekit::cli::run(&argv));
}

fn main() {
    let code = capsule_sed::cli::run(std::env::args());
    std::process::exit(code);
}

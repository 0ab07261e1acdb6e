fn main() {
    if let Err(e) = recurweight::cli::run(std::env::args_os()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

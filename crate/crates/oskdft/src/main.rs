fn main() {
    if let Err(e) = oskdft::run_cli() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

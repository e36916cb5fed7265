fn main() { std::process::exit(sttcbs::cli::run()) }

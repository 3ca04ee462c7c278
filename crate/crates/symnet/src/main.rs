fn main() {
    std::process::exit(symnet::cli::run(std::env::args_os()));
}

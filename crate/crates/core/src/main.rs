fn main() {
    std::process::exit(lfnet::cli::run(std::env::args_os()));
}

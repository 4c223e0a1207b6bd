fn main() {
    std::process::exit(stvod::cli::run(std::env::args_os()));
}

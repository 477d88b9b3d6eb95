fn main() {
    std::process::exit(xdec::cli::run(std::env::args_os()));
}

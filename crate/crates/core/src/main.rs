fn main() {
    std::process::exit(hdt::cli::run(std::env::args_os()));
}

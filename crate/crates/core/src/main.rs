fn main() {
    std::process::exit(mngac::io::cli::run(std::env::args_os()));
}

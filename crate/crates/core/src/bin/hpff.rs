fn main() {
    std::process::exit(hpff::cli::run(std::env::args_os()));
}

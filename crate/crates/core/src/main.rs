fn main() {
    std::process::exit(qsmooth::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(regadapt::cli::run(std::env::args_os()));
}

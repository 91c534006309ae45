fn main() {
    std::process::exit(cooptrack::cli::run(std::env::args_os()));
}

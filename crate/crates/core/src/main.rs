fn main() {
    std::process::exit(studentkd::harness::cli::run(std::env::args_os()));
}

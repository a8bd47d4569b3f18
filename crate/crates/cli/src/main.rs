fn main() {
    std::process::exit(jigmil_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(handgen::cli::main(std::env::args_os()));
}

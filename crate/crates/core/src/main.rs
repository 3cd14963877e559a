fn main() {
    std::process::exit(fairread::cli::main_with(std::env::args()));
}

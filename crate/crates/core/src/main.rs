fn main() {
    std::process::exit(fogsim::cli::main_with(std::env::args_os()));
}

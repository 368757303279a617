fn main() {
    std::process::exit(grainfield::cli::main_with_args(std::env::args_os()));
}

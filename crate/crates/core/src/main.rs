fn main() {
    std::process::exit(spde_lab::cli::main_with_args(std::env::args_os()));
}

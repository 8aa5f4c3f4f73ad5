fn main() {
    std::process::exit(velomix::cli::main_with_args(std::env::args_os().collect()));
}

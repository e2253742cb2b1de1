fn main() {
    std::process::exit(artprompt::cli::main_with_args(std::env::args_os()));
}

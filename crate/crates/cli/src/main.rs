fn main() {
    std::process::exit(figlut_cli::main_with_args(std::env::args_os()));
}

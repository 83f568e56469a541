fn main() {
    std::process::exit(motionctl_cli::main_with_args(std::env::args_os()));
}

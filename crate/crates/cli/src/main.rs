fn main() {
    std::process::exit(ecga::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(cknet_cli::main_with(std::env::args_os()));
}

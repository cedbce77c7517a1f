fn main() {
    std::process::exit(fedprompt_cli::main_with(std::env::args_os()));
}

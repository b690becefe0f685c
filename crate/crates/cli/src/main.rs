fn main() {
    let code = mvcib_cli::run(std::env::args_os());
    std::process::exit(code);
}

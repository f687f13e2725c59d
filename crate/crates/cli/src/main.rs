fn main() {
    std::process::exit(edt_cli::run(std::env::args_os()));
}

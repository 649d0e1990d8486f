fn main() {
    std::process::exit(crashground_cli::run(std::env::args_os()));
}

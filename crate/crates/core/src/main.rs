fn main() {
    std::process::exit(clidd::cli::run_from(std::env::args_os()));
}

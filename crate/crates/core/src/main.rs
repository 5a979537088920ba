fn main() {
    std::process::exit(acorl::cli::run_command(std::env::args_os()));
}

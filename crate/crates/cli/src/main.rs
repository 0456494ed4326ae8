fn main() {
    std::process::exit(wam_cli::run_command(std::env::args_os()));
}

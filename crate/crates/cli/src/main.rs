fn main() {
    std::process::exit(airx_cli::run_command(std::env::args_os()));
}

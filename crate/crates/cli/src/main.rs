fn main() {
    std::process::exit(densjac_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(hierwm_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(vtt_cli::run(std::env::args_os()));
}

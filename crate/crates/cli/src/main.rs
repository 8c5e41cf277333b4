fn main() {
    std::process::exit(seglab_cli::run(std::env::args_os()));
}

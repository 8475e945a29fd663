fn main() {
    std::process::exit(vasplat_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(geoind_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(gpsvi::cli::run(std::env::args_os()));
}

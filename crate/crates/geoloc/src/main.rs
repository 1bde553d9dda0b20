fn main() {
    std::process::exit(geoloc::cli::run());
}

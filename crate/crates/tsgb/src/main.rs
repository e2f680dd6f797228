fn main() {
    std::process::exit(tsgb::app::run(std::env::args_os()));
}

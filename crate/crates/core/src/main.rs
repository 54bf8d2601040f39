fn main() {
    std::process::exit(caatp::app::run(std::env::args_os()));
}

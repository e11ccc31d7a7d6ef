fn main() {
    std::process::exit(headlab::run(std::env::args_os()));
}

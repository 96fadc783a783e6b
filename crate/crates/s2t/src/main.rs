fn main() {
    std::process::exit(s2t::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(sd4r::cli::run(std::env::args_os()));
}

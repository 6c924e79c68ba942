fn main() {
    std::process::exit(lecnet_lab::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(clsm_service::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(sdm_core::cli::run(std::env::args_os()));
}

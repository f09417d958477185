fn main() {
    std::process::exit(ua3d_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(gem_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(manifold_ssl::cli::run(std::env::args_os()));
}

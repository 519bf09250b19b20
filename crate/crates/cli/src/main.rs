fn main() {
    std::process::exit(pkgem_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(nfs_cli::run(std::env::args_os()));
}

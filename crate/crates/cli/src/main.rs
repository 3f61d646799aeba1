fn main() {
    std::process::exit(vault_cli::run(std::env::args_os().collect()));
}

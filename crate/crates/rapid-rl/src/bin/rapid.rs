fn main() {
    std::process::exit(rapid_rl::cli::run_cli());
}

fn main() {
    std::process::exit(rkm_cli::cli_main(std::env::args().collect()));
}

fn main() {
    std::process::exit(ntk_align::cli::run_cli(std::env::args_os()));
}

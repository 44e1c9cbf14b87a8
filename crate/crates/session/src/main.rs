fn main() {
    cathtwin::cli::init_logging();
    std::process::exit(cathtwin::cli::run_cli(std::env::args_os()));
}

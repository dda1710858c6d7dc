fn main() {
    std::process::exit(seedwalk::cli::cli_dispatch(std::env::args_os()));
}

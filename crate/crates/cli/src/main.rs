fn main() {
    std::process::exit(hdlink_cli::dispatch(std::env::args_os()));
}

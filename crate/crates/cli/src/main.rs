fn main() {
    std::process::exit(cavg_cli::dispatch(std::env::args_os()));
}

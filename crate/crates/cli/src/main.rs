fn main() {
    std::process::exit(s2svc_cli::dispatch(std::env::args_os()));
}

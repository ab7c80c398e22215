fn main() {
    std::process::exit(retiflow::cli::dispatch(std::env::args_os()));
}

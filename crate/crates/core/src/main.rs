fn main() {
    std::process::exit(bijou::cli::dispatch(std::env::args_os()));
}

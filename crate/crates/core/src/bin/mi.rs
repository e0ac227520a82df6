fn main() {
    std::process::exit(mi_core::cli::dispatch(std::env::args_os()));
}

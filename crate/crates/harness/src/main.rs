fn main() {
    std::process::exit(samlab_harness::cli::run(std::env::args_os()));
}

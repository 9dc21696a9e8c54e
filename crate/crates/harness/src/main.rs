fn main() {
    std::process::exit(rballoc_harness::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(delaystream::runner::cli_main(std::env::args_os()));
}

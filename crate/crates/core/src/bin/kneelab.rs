fn main() {
    std::process::exit(kneelab::lab::cli_main(std::env::args_os()));
}

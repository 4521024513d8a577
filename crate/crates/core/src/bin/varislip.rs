fn main() {
    std::process::exit(varislip::cli_io::main(std::env::args_os()));
}

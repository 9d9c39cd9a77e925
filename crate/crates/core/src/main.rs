fn main() {
    std::process::exit(crl_lab::cli::run(std::env::args_os()));
}

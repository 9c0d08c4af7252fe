fn main() {
    std::process::exit(vclr::cli::main_with(std::env::args_os()));
}

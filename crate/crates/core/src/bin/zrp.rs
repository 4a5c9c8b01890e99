fn main() {
    let code = zrp_core::cli::main_with(std::env::args_os(), &mut std::io::stderr());
    std::process::exit(code);
}

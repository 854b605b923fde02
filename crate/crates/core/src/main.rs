fn main() {
    std::process::exit(mfg_switch::cli::run(std::env::args_os()));
}
